// Expects the wasm-pack output in ./pkg:
//   wasm-pack build crates/demo --target web --out-dir www/pkg
import init, { sample_frame, clean_text, hold_timeline, f1_sweep } from "./pkg/usmask_demo.js";

const $ = (id) => document.getElementById(id);

function showGray(canvas, width, height, pixels, scale = 3) {
  canvas.width = width;
  canvas.height = height;
  canvas.style.width = `${width * scale}px`;
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(width, height);
  for (let i = 0; i < pixels.length; i++) {
    img.data.set([pixels[i], pixels[i], pixels[i], 255], i * 4);
  }
  ctx.putImageData(img, 0, 0);
}

// ---- text cleanup

let frame = null; // { width, height, pixels }
let sampleSeed = 1n;

function newSample() {
  const width = 96, height = 64;
  frame = { width, height, pixels: sample_frame(width, height, sampleSeed++) };
  runClean();
}

function loadFile(file) {
  const img = new Image();
  img.onload = () => {
    // Large images make inpainting slow; cap the long side.
    const s = Math.min(1, 320 / Math.max(img.width, img.height));
    const width = Math.max(8, Math.round(img.width * s));
    const height = Math.max(8, Math.round(img.height * s));
    const c = document.createElement("canvas");
    c.width = width;
    c.height = height;
    const ctx = c.getContext("2d");
    ctx.drawImage(img, 0, 0, width, height);
    const rgba = ctx.getImageData(0, 0, width, height).data;
    const pixels = new Uint8Array(width * height);
    for (let i = 0; i < pixels.length; i++) {
      pixels[i] = Math.round(0.299 * rgba[i * 4] + 0.587 * rgba[i * 4 + 1] + 0.114 * rgba[i * 4 + 2]);
    }
    frame = { width, height, pixels };
    runClean();
  };
  img.src = URL.createObjectURL(file);
}

function runClean() {
  if (!frame) return;
  const { width, height, pixels } = frame;
  const scale = width > 200 ? 1 : 3;
  showGray($("src"), width, height, pixels, scale);
  const low = $("auto-low").checked ? undefined : Number($("low").value);
  try {
    const t0 = performance.now();
    const out = clean_text(width, height, pixels, low);
    const ms = performance.now() - t0;
    const n = width * height;
    const mask = out.subarray(0, n);
    showGray($("mask"), width, height, mask, scale);
    showGray($("clean"), width, height, out.subarray(n), scale);
    const marked = mask.reduce((a, v) => a + (v ? 1 : 0), 0);
    $("clean-info").textContent = `${marked} of ${n} pixels inpainted in ${ms.toFixed(1)} ms`;
  } catch (e) {
    $("clean-info").textContent = `cannot clean this image: ${e.message ?? e}`;
  }
}

// ---- hold timeline

const COLORS = { fresh: "#2a9d8f", held: "#e9c46a", held_sim: "#f4a261" };

function runTimeline() {
  const n = Number($("n").value);
  const tau = Number($("tau").value);
  $("n-out").textContent = n;
  $("tau-out").textContent = tau.toFixed(2);
  const t = JSON.parse(hold_timeline(120, n, tau, BigInt($("seed").value || 0)));
  const canvas = $("timeline");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const frames = t.roi.length;
  const cell = (canvas.width - 90) / frames;
  const names = ["off", "hold", "hold + SSIM"];
  ctx.font = "12px system-ui";
  t.sources.forEach((row, k) => {
    const y = 10 + k * 45;
    ctx.fillStyle = "#222";
    ctx.fillText(names[k], 0, y + 20);
    row.forEach((src, i) => {
      ctx.fillStyle = COLORS[src] ?? (t.roi[i] ? "#e63946" : "#ddd");
      ctx.fillRect(90 + i * cell, y, Math.max(1, cell - 1), 30);
    });
  });
  const pct = (x) => `${(100 * x).toFixed(1)}%`;
  $("timeline-info").textContent =
    `frames with a visible region left unmasked: off ${pct(t.post_fn_rate[0])}, ` +
    `hold ${pct(t.post_fn_rate[1])}, hold + SSIM ${pct(t.post_fn_rate[2])}`;
}

// ---- sweep

function runSweep() {
  const noise = Number($("noise").value);
  const iou = Number($("iou").value);
  $("noise-out").textContent = noise.toFixed(2);
  $("iou-out").textContent = iou.toFixed(2);
  const curve = JSON.parse(f1_sweep(300, noise, iou, 100, 5n));
  const canvas = $("sweep");
  const ctx = canvas.getContext("2d");
  const [w, h, pad] = [canvas.width, canvas.height, 30];
  const X = (c) => pad + c * (w - 2 * pad);
  const Y = (v) => h - pad - v * (h - 2 * pad);
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#666";
  ctx.font = "11px system-ui";
  for (const v of [0, 0.5, 1]) {
    ctx.fillText(v.toFixed(1), X(v) - 8, h - 10);
    ctx.fillText(v.toFixed(1), 4, Y(v) + 4);
  }
  const series = [["precision", "#457b9d"], ["recall", "#e76f51"], ["f1", "#2a9d8f"]];
  for (const [key, color] of series) {
    ctx.strokeStyle = color;
    ctx.lineWidth = key === "f1" ? 2.5 : 1.5;
    ctx.beginPath();
    curve.points.forEach((p, i) => (i ? ctx.lineTo : ctx.moveTo).call(ctx, X(p.conf), Y(p[key])));
    ctx.stroke();
    ctx.fillStyle = color;
    ctx.fillText(key, w - pad - 60, pad + 14 + 14 * series.findIndex((s) => s[0] === key));
  }
  ctx.fillStyle = "#000";
  ctx.beginPath();
  ctx.arc(X(curve.best_conf), Y(curve.best_f1), 4, 0, 2 * Math.PI);
  ctx.fill();
  const best = curve.points.find((p) => p.conf === curve.best_conf);
  $("sweep-info").textContent =
    `best threshold ${best.conf.toFixed(2)}: F1 ${best.f1.toFixed(3)}, precision ${best.precision.toFixed(3)}, ` +
    `recall ${best.recall.toFixed(3)}, false positives per frame ${best.fppi.toFixed(3)}`;
}

async function main() {
  await init();
  $("sample").onclick = newSample;
  $("file").onchange = (e) => e.target.files[0] && loadFile(e.target.files[0]);
  $("auto-low").onchange = () => {
    $("low").disabled = $("auto-low").checked;
    runClean();
  };
  $("low").oninput = () => {
    $("low-out").textContent = $("low").value;
    runClean();
  };
  for (const id of ["n", "tau", "seed"]) $(id).oninput = runTimeline;
  for (const id of ["noise", "iou"]) $(id).oninput = runSweep;
  newSample();
  runTimeline();
  runSweep();
}

main().catch((e) => {
  $("error").textContent = `Failed to start: ${e.message ?? e}. Build the wasm package first (see README).`;
});
