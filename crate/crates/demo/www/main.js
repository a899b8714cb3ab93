import init, { compareMethods, sampleMask, biasByEll } from "./pkg/tuplesgd_demo.js";

const COLORS = { sgd: "#888", msgd: "#d62728", "tuple-msgd": "#1f77b4" };

const num = (id) => Number(document.getElementById(id).value);

function guard(errId, fn) {
  const el = document.getElementById(errId);
  el.textContent = "";
  try {
    fn();
  } catch (e) {
    el.textContent = String(e);
  }
}

function plotTraces(canvas, iterations, traces) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, pad = 40;
  ctx.clearRect(0, 0, w, h);
  const all = Object.values(traces).flat().filter((v) => v > 0);
  const lo = Math.log10(Math.min(...all)), hi = Math.log10(Math.max(...all));
  const kmax = iterations[iterations.length - 1] || 1;
  const x = (k) => pad + (k / kmax) * (w - 2 * pad);
  const y = (v) => h - pad - ((Math.log10(v) - lo) / (hi - lo || 1)) * (h - 2 * pad);

  ctx.strokeStyle = "#ccc";
  ctx.fillStyle = "#444";
  ctx.font = "11px sans-serif";
  for (let d = Math.ceil(lo); d <= Math.floor(hi); d++) {
    ctx.beginPath();
    ctx.moveTo(pad, y(10 ** d));
    ctx.lineTo(w - pad, y(10 ** d));
    ctx.stroke();
    ctx.fillText(`1e${d}`, 2, y(10 ** d) + 4);
  }
  ctx.fillText(`k = ${kmax}`, w - pad - 50, h - 10);

  for (const [name, errs] of Object.entries(traces)) {
    ctx.strokeStyle = COLORS[name] || "#000";
    ctx.beginPath();
    errs.forEach((v, i) => {
      const px = x(iterations[i]), py = y(Math.max(v, 10 ** lo));
      i === 0 ? ctx.moveTo(px, py) : ctx.lineTo(px, py);
    });
    ctx.stroke();
  }
}

function runCompare() {
  const out = JSON.parse(
    compareMethods(num("c-m"), num("c-n"), num("c-ell"), num("c-p"), num("c-alpha"), num("c-k"), 400, num("c-seed")),
  );
  plotTraces(document.getElementById("c-plot"), out.iterations, out.traces);
  document.getElementById("c-legend").innerHTML = Object.entries(out.traces)
    .map(([name, errs]) => `<span style="color:${COLORS[name]}">${name}: ${errs[errs.length - 1].toExponential(3)}</span>`)
    .join("");
}

function runMask() {
  const rows = num("m-rows"), n = num("m-n");
  const bits = sampleMask(rows, n, num("m-ell"), num("m-p"), num("m-seed"));
  const canvas = document.getElementById("m-plot");
  const ctx = canvas.getContext("2d");
  const cw = canvas.width / n, ch = canvas.height / rows;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  let seen = 0;
  for (let i = 0; i < rows; i++) {
    for (let j = 0; j < n; j++) {
      const on = bits[i * n + j];
      seen += on;
      ctx.fillStyle = on ? "#1f77b4" : "#eee";
      ctx.fillRect(j * cw, i * ch, Math.ceil(cw), Math.ceil(ch));
    }
  }
  document.getElementById("m-info").textContent = `observed fraction ${(seen / bits.length).toFixed(3)}`;
}

function runBias() {
  const rows = JSON.parse(biasByEll(num("b-m"), num("b-n"), num("b-p"), num("b-seed")));
  const canvas = document.getElementById("b-plot");
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, pad = 30;
  ctx.clearRect(0, 0, w, h);
  const top = Math.max(...rows.map((r) => r.relative_bias)) || 1;
  const bw = (w - 2 * pad) / rows.length;
  ctx.font = "11px sans-serif";
  rows.forEach((r, i) => {
    const bh = (r.relative_bias / top) * (h - 2 * pad);
    ctx.fillStyle = "#1f77b4";
    ctx.fillRect(pad + i * bw + 4, h - pad - bh, bw - 8, bh);
    ctx.fillStyle = "#222";
    ctx.fillText(`ℓ=${r.ell}`, pad + i * bw + 4, h - 10);
    ctx.fillText(r.relative_bias.toFixed(3), pad + i * bw + 4, h - pad - bh - 4);
  });
}

await init();
document.getElementById("status").textContent = "ready";
document.getElementById("c-run").onclick = () => guard("c-err", runCompare);
document.getElementById("m-run").onclick = () => guard("m-err", runMask);
document.getElementById("b-run").onclick = () => guard("b-err", runBias);
