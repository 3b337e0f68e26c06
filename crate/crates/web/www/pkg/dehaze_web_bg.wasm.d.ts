/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_clean_rgba: (a: number) => [number, number];
export const demo_dehazed_rgba: (a: number) => [number, number];
export const demo_dehazed_ssim: (a: number) => number;
export const demo_depth_rgba: (a: number) => [number, number];
export const demo_edge_terms: (a: number) => [number, number];
export const demo_edges: (a: number, b: number, c: number) => [number, number];
export const demo_hazy_rgba: (a: number) => [number, number];
export const demo_hazy_ssim: (a: number) => number;
export const demo_new: (a: number, b: number) => number;
export const demo_recover: (a: number, b: number, c: number, d: number) => [number, number];
export const demo_size: (a: number) => number;
export const demo_synthesize: (a: number, b: number, c: number) => [number, number];
export const demo_transmission_rgba: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
