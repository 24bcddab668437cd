// Built by `wasm-bindgen --target web --out-dir www/pkg`.
import init, { Demo } from "./pkg/veracity_web.js";

const $ = (id) => document.getElementById(id);
let demo = null;
let last = null;

function escape(s) {
  return s.replace(/[&<>"']/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;", "'": "&#39;" })[c]);
}

function percent(x) {
  return (100 * x).toFixed(1) + "%";
}

function showError(message) {
  $("error").textContent = message;
  $("error").hidden = !message;
}

function train() {
  $("status").textContent = "Training…";
  $("run").disabled = true;
  // let the status line paint before the blocking call
  setTimeout(() => {
    const started = performance.now();
    try {
      if (demo) demo.free();
      demo = new Demo(Number($("n").value), Number($("seed").value), Number($("epochs").value));
    } catch (e) {
      demo = null;
      $("status").textContent = "Training failed: " + e.message;
      return;
    }
    const seconds = ((performance.now() - started) / 1000).toFixed(1);
    renderSummary(JSON.parse(demo.summary()), seconds);
    $("run").disabled = !$("text").value.trim();
  }, 20);
}

function renderSummary(s, seconds) {
  $("status").textContent =
    `Trained ${s.parameters.toLocaleString()} parameters on ${s.train_size} statements in ${seconds} s; ${s.test_size} held out.`;
  const r = s.report;
  const rows = [
    ["accuracy", r.accuracy], ["precision", r.precision], ["recall", r.recall],
    ["F1", r.f1], ["ROC-AUC", r.roc_auc], ["average precision", r.average_precision],
  ];
  $("metrics").innerHTML = "<tr><th>held-out</th><th></th></tr>" +
    rows.map(([k, v]) => `<tr><td>${k}</td><td>${v == null ? "n/a" : v.toFixed(3)}</td></tr>`).join("");
  $("truthful").textContent = s.truthful_signals.join(", ");
  $("deceptive").textContent = s.deceptive_signals.join(", ");
  $("examples").innerHTML = "Try: " + s.examples.map((t) => `<button>${escape(t)}</button>`).join("");
  for (const b of $("examples").querySelectorAll("button")) {
    b.addEventListener("click", () => {
      $("text").value = b.textContent;
      $("run").disabled = false;
      classify();
    });
  }
  $("summary").hidden = false;
}

function classify() {
  if (!demo) return;
  let response;
  try {
    response = JSON.parse(demo.classify($("text").value, Number($("topk").value)));
  } catch (e) {
    showError(e.message);
    return;
  }
  showError("");
  last = response;
  renderVerdict(response);
  renderAttentionControls(response);
}

function renderVerdict(r) {
  const confidence = r.label === "deceptive" ? r.probability : 1 - r.probability;
  $("verdict").innerHTML =
    `<span class="verdict-${r.label}">${r.label}</span> with probability ${percent(confidence)}`;
  const top = Math.max(...r.tokens.map((t) => t.saliency)) || 1;
  $("highlighted").innerHTML = r.tokens.map((t) => {
    if (!t.highlighted) return `<span>${escape(t.word)}</span>`;
    const alpha = (0.25 + 0.75 * t.saliency / top).toFixed(2);
    return `<mark><span style="background: rgba(231, 76, 60, ${alpha})" title="${percent(t.saliency)}">${escape(t.word)}</span></mark>`;
  }).join(" ");
  $("scores").innerHTML = "<tr><th>word</th><th>saliency</th><th></th></tr>" + r.tokens.map((t) =>
    `<tr><td>${escape(t.word)}</td><td>${percent(t.saliency)}</td>` +
    `<td><span class="bar" style="width: ${(12 * t.saliency / top).toFixed(2)}rem"></span></td></tr>`
  ).join("");
  $("result").hidden = false;
}

function renderAttentionControls(r) {
  const layers = r.attention.layers;
  const options = (n, prefix) => Array.from({ length: n }, (_, i) => `<option value="${i}">${prefix} ${i + 1}</option>`).join("");
  const layer = Math.min(Number($("layer").value) || 0, layers.length - 1);
  const head = Math.min(Number($("head").value) || 0, layers[0].length - 1);
  $("layer").innerHTML = options(layers.length, "layer");
  $("head").innerHTML = options(layers[0].length, "head");
  $("layer").value = layer;
  $("head").value = head;
  $("attention").hidden = false;
  renderHeatmap();
}

function renderHeatmap() {
  if (!last) return;
  const words = last.tokens.map((t) => escape(t.word));
  const matrix = last.attention.layers[Number($("layer").value)][Number($("head").value)];
  let html = "<table><tr><th></th>" + words.map((w) => `<th class="key">${w}</th>`).join("") + "</tr>";
  matrix.forEach((row, q) => {
    html += `<tr><th>${words[q]}</th>` + row.map((w) => {
      const shade = Math.round(255 * (1 - w));
      const ink = w > 0.5 ? "#fff" : "#222";
      return `<td style="background: rgb(${shade}, ${shade}, 255); color: ${ink}" title="${words[q]} → ${(100 * w).toFixed(1)}%">${(100 * w).toFixed(0)}</td>`;
    }).join("") + "</tr>";
  });
  $("heatmap").innerHTML = html + "</table>";
}

$("train").addEventListener("click", train);
$("run").addEventListener("click", classify);
$("text").addEventListener("input", () => { $("run").disabled = !demo || !$("text").value.trim(); });
$("text").addEventListener("keydown", (e) => { if (e.key === "Enter" && (e.ctrlKey || e.metaKey)) classify(); });
$("topk").addEventListener("input", () => {
  $("topk-value").textContent = $("topk").value;
  if (last) classify();
});
$("layer").addEventListener("change", renderHeatmap);
$("head").addEventListener("change", renderHeatmap);

init().then(train, (e) => { $("status").textContent = "Could not load the WebAssembly module: " + e; });
