import init, { Demo } from "./pkg/dehaze_web.js";

const SIZE = 128;
const $ = (id) => document.getElementById(id);
const value = (id) => Number($(id).value);

function paint(id, rgba, width, height) {
  const canvas = $(id);
  canvas.width = width;
  canvas.height = height;
  const image = new ImageData(new Uint8ClampedArray(rgba), width, height);
  canvas.getContext("2d").putImageData(image, 0, 0);
}

function showOutputs() {
  for (const out of document.querySelectorAll("output")) {
    out.textContent = $(out.htmlFor).value;
  }
}

let demo;

function synthesize() {
  const n = demo.size();
  paint("hazy", demo.synthesize(value("beta"), value("airlight")), n, n);
  paint("transmission", demo.transmission_rgba(), n, n);
  $("hazy-ssim").textContent = `SSIM(I, J) = ${demo.hazy_ssim().toFixed(4)}`;
  recover();
  edges();
}

function recover() {
  const n = demo.size();
  paint("dehazed", demo.recover(value("guess"), value("floor"), value("tscale")), n, n);
  $("dehazed-ssim").textContent = `SSIM(Ĵ, J) = ${demo.dehazed_ssim().toFixed(4)}`;
}

function edges() {
  const n = demo.size();
  paint("edges", demo.edges(value("shift"), value("blur")), 2 * n, n);
  const [l2, grad, feat, total] = demo.edge_terms();
  const f = (v) => v.toExponential(3);
  $("edge-terms").textContent = `L2 ${f(l2)}   gradient ${f(grad)}   feature ${f(feat)}   weighted total ${f(total)}`;
}

function loadScene() {
  if (demo) demo.free();
  demo = new Demo(value("seed"), SIZE);
  const n = demo.size();
  paint("clean", demo.clean_rgba(), n, n);
  paint("depth", demo.depth_rgba(), n, n);
  synthesize();
}

await init();
const handlers = { seed: loadScene, beta: synthesize, airlight: synthesize, guess: recover, tscale: recover, floor: recover, shift: edges, blur: edges };
for (const [id, handler] of Object.entries(handlers)) {
  $(id).addEventListener("input", () => {
    showOutputs();
    handler();
  });
}
showOutputs();
loadScene();
