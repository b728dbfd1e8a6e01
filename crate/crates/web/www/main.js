import init, { variogram, surface, selftrain } from "./pkg/bimkit_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function fail(out, e) {
  out.className = "err";
  out.textContent = String(e);
}

// Blue (0) to red (1).
function color(p) {
  const r = Math.round(255 * p);
  const b = Math.round(255 * (1 - p));
  return `rgb(${r},${Math.round(80 + 60 * (1 - Math.abs(2 * p - 1)))},${b})`;
}

function extent(points) {
  const xs = points.map((p) => p[0]);
  const ys = points.map((p) => p[1]);
  return [Math.min(...xs), Math.max(...xs), Math.min(...ys), Math.max(...ys)];
}

function drawPoints(canvas, points, valueRange) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const [x0, x1, y0, y1] = extent(points);
  const [lo, hi] = valueRange;
  for (const [x, y, v] of points) {
    const px = ((x - x0) / (x1 - x0 || 1)) * (canvas.width - 10) + 5;
    const py = canvas.height - (((y - y0) / (y1 - y0 || 1)) * (canvas.height - 10) + 5);
    ctx.fillStyle = color((v - lo) / (hi - lo || 1));
    ctx.fillRect(px - 2, py - 2, 4, 4);
  }
}

function runVariogram() {
  const out = $("vg-out");
  out.className = "";
  try {
    const r = JSON.parse(variogram(num("vg-n"), num("vg-ls"), $("vg-family").value, num("vg-seed")));
    const vals = r.points.map((p) => p[2]);
    drawPoints($("vg-points"), r.points, [Math.min(...vals), Math.max(...vals)]);

    const c = $("vg-plot");
    const ctx = c.getContext("2d");
    ctx.clearRect(0, 0, c.width, c.height);
    const hmax = r.curve[r.curve.length - 1][0];
    const gmax = Math.max(...r.bins.map((b) => b.semivariance), ...r.curve.map((p) => p[1])) * 1.1;
    const X = (h) => 40 + (h / hmax) * (c.width - 50);
    const Y = (g) => c.height - 30 - (g / gmax) * (c.height - 40);
    ctx.strokeStyle = "#999";
    ctx.beginPath();
    ctx.moveTo(40, 10);
    ctx.lineTo(40, c.height - 30);
    ctx.lineTo(c.width - 10, c.height - 30);
    ctx.stroke();
    ctx.fillStyle = "#333";
    ctx.fillText("lag (m)", c.width - 60, c.height - 12);
    ctx.fillText(`${Math.round(hmax)}`, c.width - 40, c.height - 18);
    ctx.fillText("γ", 20, 20);
    ctx.strokeStyle = "#c33";
    ctx.beginPath();
    r.curve.forEach(([h, g], i) => (i ? ctx.lineTo(X(h), Y(g)) : ctx.moveTo(X(h), Y(g))));
    ctx.stroke();
    ctx.fillStyle = "#236";
    for (const b of r.bins) {
      ctx.beginPath();
      ctx.arc(X(b.mean_lag), Y(b.semivariance), 3, 0, 2 * Math.PI);
      ctx.fill();
    }
    const m = r.model;
    out.textContent = `${m.family}: nugget ${m.nugget.toFixed(3)}, sill ${m.sill.toFixed(3)}, range ${m.range.toFixed(0)} m`;
  } catch (e) {
    fail(out, e);
  }
}

function runSurface() {
  const out = $("sf-out");
  out.className = "";
  try {
    const t0 = performance.now();
    const r = JSON.parse(surface(num("sf-n"), $("sf-engine").value, num("sf-cell"), num("sf-seed")));
    const ms = performance.now() - t0;
    const c = $("sf-canvas");
    const ctx = c.getContext("2d");
    ctx.clearRect(0, 0, c.width, c.height);
    const s = Math.min(c.width / r.ncols, c.height / r.nrows);
    // Row 0 is the northern edge.
    for (let row = 0; row < r.nrows; row++) {
      for (let col = 0; col < r.ncols; col++) {
        const v = r.values[row * r.ncols + col];
        ctx.fillStyle = v === null ? "#eee" : color(v);
        ctx.fillRect(col * s, row * s, Math.ceil(s), Math.ceil(s));
      }
    }
    const west = r.xllcorner;
    const north = r.yllcorner + r.nrows * r.cell_size;
    ctx.fillStyle = "#000";
    for (const [lon, lat] of r.points) {
      ctx.fillRect(((lon - west) / r.cell_size) * s - 1, ((north - lat) / r.cell_size) * s - 1, 2, 2);
    }
    const data = r.values.filter((v) => v !== null);
    const hot = data.filter((v) => v >= 0.5).length;
    out.textContent =
      `${r.ncols} x ${r.nrows} cells, ${data.length} with data, ${hot} at p >= 0.5; ` +
      `cutoff ${r.cutoff_m.toFixed(0)} m; ${ms.toFixed(0)} ms`;
  } catch (e) {
    fail(out, e);
  }
}

function runSelftrain() {
  const out = $("st-out");
  out.className = "";
  try {
    const r = JSON.parse(selftrain(num("st-n"), num("st-tau"), num("st-rounds"), num("st-seed")));
    const pct = (x) => (100 * x).toFixed(1) + "%";
    const rows = r.rounds
      .map(
        (x) =>
          `<tr><td>${x.round}</td><td>${x.trained_on}</td><td>${x.accepted}</td>` +
          `<td>${x.mean_confidence.toFixed(3)}</td><td>${x.labeled}</td><td>${x.remaining_pool}</td>` +
          `<td>${pct(x.eval.accuracy)}</td><td>${pct(x.eval.precision)}</td><td>${pct(x.eval.recall)}</td>` +
          `<td>${pct(x.eval.f1)}</td></tr>`,
      )
      .join("");
    out.innerHTML =
      `<p>${r.seed_labeled} expert labels, ${r.pool} unlabeled, ${r.test} held out.</p>` +
      `<table><tr><th>round</th><th>trained on</th><th>accepted</th><th>mean conf.</th>` +
      `<th>labeled</th><th>pool left</th><th>accuracy</th><th>precision</th><th>recall</th><th>F1</th></tr>` +
      rows +
      `</table>`;
  } catch (e) {
    fail(out, e);
  }
}

await init();
$("vg-run").addEventListener("click", runVariogram);
$("sf-run").addEventListener("click", runSurface);
$("st-run").addEventListener("click", runSelftrain);
runVariogram();
runSurface();
runSelftrain();
