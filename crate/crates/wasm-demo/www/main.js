import init, { noise_histogram, cosine_vs_level, train_curves } from "./pkg/cimste_wasm.js";

const COLORS = { baseline: "#888", detached: "#c33", full: "#36c" };
const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function frame(canvas, xmin, xmax, ymin, ymax) {
  const ctx = canvas.getContext("2d");
  const pad = 36;
  const w = canvas.width - 2 * pad;
  const h = canvas.height - 2 * pad;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#444";
  ctx.font = "11px sans-serif";
  ctx.fillText(ymax.toPrecision(3), 2, pad + 4);
  ctx.fillText(ymin.toPrecision(3), 2, pad + h);
  ctx.fillText(xmin.toPrecision(3), pad, pad + h + 14);
  ctx.fillText(xmax.toPrecision(3), pad + w - 24, pad + h + 14);
  const sx = (x) => pad + ((x - xmin) / (xmax - xmin || 1)) * w;
  const sy = (y) => pad + h - ((y - ymin) / (ymax - ymin || 1)) * h;
  return { ctx, sx, sy };
}

function line(p, xs, ys, color) {
  p.ctx.strokeStyle = color;
  p.ctx.lineWidth = 2;
  p.ctx.beginPath();
  xs.forEach((x, i) => (i ? p.ctx.lineTo : p.ctx.moveTo).call(p.ctx, p.sx(x), p.sy(ys[i])));
  p.ctx.stroke();
}

// Runs `work` after the status text has painted, since the call blocks.
function busy(statusId, work) {
  $(statusId).textContent = "running...";
  setTimeout(() => {
    const t0 = performance.now();
    try {
      work();
      $(statusId).textContent = `${((performance.now() - t0) / 1000).toFixed(2)} s`;
    } catch (e) {
      $(statusId).textContent = String(e);
    }
  }, 20);
}

function histogram() {
  const n = num("h-size");
  const h = JSON.parse(noise_histogram(num("h-level"), n, n, 60));
  const width = h.edges[1] - h.edges[0];
  const p = frame($("h-plot"), h.edges[0], h.edges[h.edges.length - 1] + width, 0, Math.max(...h.counts));
  p.ctx.fillStyle = "#36c";
  h.counts.forEach((c, i) => {
    const x0 = p.sx(h.edges[i]);
    const x1 = p.sx(h.edges[i] + width);
    p.ctx.fillRect(x0, p.sy(c), x1 - x0 - 1, p.sy(0) - p.sy(c));
  });
  p.ctx.fillStyle = "#222";
  p.ctx.fillText(`ln(g / target), log-sd ${h.sigma.toFixed(3)}`, 300, 20);
}

function cosine() {
  const levels = [0, 0.5, 1, 1.5, 2, 2.5, 3];
  const pts = JSON.parse(cosine_vs_level(new Float64Array(levels), $("c-crossbar").checked, num("c-samples")));
  const p = frame($("c-plot"), 0, 3, 0, 1);
  line(p, levels, pts.map((q) => q.cos_mean), "#c33");
  line(p, levels, pts.map((q) => q.cos_predicted), "#36c");
}

function training() {
  const curves = JSON.parse(train_curves(num("t-level"), num("t-steps"), num("t-seed")));
  const all = curves.flatMap((c) => c.train_loss).filter(Number.isFinite);
  const last = Math.max(...curves.map((c) => c.steps[c.steps.length - 1]));
  const p = frame($("t-plot"), 0, last, 0, Math.max(...all));
  for (const c of curves) line(p, c.steps, c.train_loss, COLORS[c.mode]);
  $("t-legend").innerHTML = curves
    .map((c) => {
      const acc = c.eval_accuracy[c.eval_accuracy.length - 1];
      return `<span style="color:${COLORS[c.mode]}">${c.mode}: final noisy accuracy ${(100 * acc).toFixed(1)}%</span>`;
    })
    .join("");
}

await init();
$("h-run").onclick = () => busy("h-status", histogram);
$("c-run").onclick = () => busy("c-status", cosine);
$("t-run").onclick = () => busy("t-status", training);
busy("h-status", histogram);
