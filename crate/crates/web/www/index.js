import init, { schedules, maskView, discriminator } from "./pkg/dmda_web.js";

const $ = (id) => document.getElementById(id);

function parse(json, errorEl) {
  const v = JSON.parse(json);
  errorEl.textContent = v.error ?? "";
  return v.error ? null : v;
}

function drawCurves() {
  const v = parse(schedules(Number($("steps").value), Number($("lr").value), $("decay").value, 201), $("curves-error"));
  const c = $("curves");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  if (!v) return;
  const last = v.step[v.step.length - 1];
  const base = v.lr[0];
  const plot = (ys, color) => {
    g.strokeStyle = color;
    g.beginPath();
    ys.forEach((y, i) => {
      const px = 10 + (c.width - 20) * (v.step[i] / last);
      const py = c.height - 10 - (c.height - 20) * y;
      i ? g.lineTo(px, py) : g.moveTo(px, py);
    });
    g.stroke();
  };
  plot(v.lambda, "#2a7");
  plot(v.lr.map((x) => x / base), "#27c");
}

function drawMasks() {
  const m = Number($("m").value);
  $("m-value").textContent = m.toFixed(2);
  const v = parse(maskView(Number($("seed").value), Number($("channels").value), Number($("classes").value), m), $("masks-error"));
  const out = $("masks");
  out.replaceChildren();
  if (!v) return;
  const table = document.createElement("table");
  table.className = "mask";
  v.masks.forEach((row, cls) => {
    const tr = table.insertRow();
    const head = tr.insertCell();
    head.textContent = `class ${cls}: ${v.survivors[cls]} kept`;
    head.style.width = "9rem";
    row.forEach((keep, k) => {
      const td = tr.insertCell();
      td.className = keep ? "keep" : "drop";
      td.title = `channel ${k}: w=${v.weights[cls][k].toFixed(3)}, cut=${v.thresholds[cls].toFixed(3)}`;
    });
  });
  out.append(table);
}

function showTheory() {
  const v = JSON.parse(discriminator($("dists").value));
  if (v.error) {
    $("theory").textContent = v.error;
    return;
  }
  const rows = v.optimal.map((r, z) => `  point ${z}: [${r.map((x) => x.toFixed(4)).join(", ")}]`).join("\n");
  $("theory").textContent =
    `optimal D per point:\n${rows}\n` +
    `objective at optimum   ${v.objective.toFixed(6)}\n` +
    `M·JSD − M·ln M         ${(v.objective - v.identity_residual).toFixed(6)}\n` +
    `JSD (nats)             ${v.jsd.toFixed(6)}\n` +
    `floor −M·ln M          ${v.floor.toFixed(6)}  (reached iff all rows are equal)`;
}

await init();
for (const id of ["steps", "lr", "decay"]) $(id).addEventListener("input", drawCurves);
for (const id of ["seed", "channels", "classes", "m"]) $(id).addEventListener("input", drawMasks);
$("dists").addEventListener("input", showTheory);
drawCurves();
drawMasks();
showTheory();
