/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    clean_rgba(): Uint8Array;
    dehazed_rgba(): Uint8Array;
    /**
     * SSIM of the last recovery against the clean scene.
     */
    dehazed_ssim(): number;
    depth_rgba(): Uint8Array;
    /**
     * `[L2, gradient, feature, weighted total]` from the last [`Demo::edges`] call.
     */
    edge_terms(): Float64Array;
    /**
     * Corrupts the transmission by a horizontal shift and `blur` box-filter
     * passes, then returns `[|∇t| | |∇t̂|]` side by side. The loss terms are
     * available from [`Demo::edge_terms`].
     */
    edges(shift: number, blur: number): Uint8Array;
    hazy_rgba(): Uint8Array;
    /**
     * SSIM of the hazy image against the clean scene.
     */
    hazy_ssim(): number;
    /**
     * Renders scene `seed` at `size × size` (clamped to 16..=256) under
     * default haze (`β = 1`, `A = 0.8`).
     */
    constructor(seed: number, size: number);
    /**
     * Inverts the haze model with an airlight guess and the true transmission
     * scaled by `t_scale`, floored at `t_floor`; returns the recovered image.
     */
    recover(airlight_guess: number, t_floor: number, t_scale: number): Uint8Array;
    size(): number;
    /**
     * Applies `I = J·t + A(1 − t)` with `t = exp(−β·d)`; returns the hazy image.
     */
    synthesize(beta: number, airlight: number): Uint8Array;
    transmission_rgba(): Uint8Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_clean_rgba: (a: number) => [number, number];
    readonly demo_dehazed_rgba: (a: number) => [number, number];
    readonly demo_dehazed_ssim: (a: number) => number;
    readonly demo_depth_rgba: (a: number) => [number, number];
    readonly demo_edge_terms: (a: number) => [number, number];
    readonly demo_edges: (a: number, b: number, c: number) => [number, number];
    readonly demo_hazy_rgba: (a: number) => [number, number];
    readonly demo_hazy_ssim: (a: number) => number;
    readonly demo_new: (a: number, b: number) => number;
    readonly demo_recover: (a: number, b: number, c: number, d: number) => [number, number];
    readonly demo_size: (a: number) => number;
    readonly demo_synthesize: (a: number, b: number, c: number) => [number, number];
    readonly demo_transmission_rgba: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
