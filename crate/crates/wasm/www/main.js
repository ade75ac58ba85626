// SPDX-License-Identifier: MIT OR Apache-2.0

import init, { Explorer } from "./pkg/patchlens_wasm.js";

const $ = (id) => document.getElementById(id);
let explorer;
let grid = null;
let selected = null;

function pngUrl(bytes) {
  return URL.createObjectURL(new Blob([bytes], { type: "image/png" }));
}

function guard(out, f) {
  try {
    out.classList.remove("error");
    f();
  } catch (e) {
    out.classList.add("error");
    out.textContent = String(e.message ?? e);
  }
}

function headLines(r) {
  return r.top_heads
    .map((h) => `  ${h.head.padEnd(5)} S=${h.score.toFixed(3)} share=${(100 * h.share).toFixed(1)}%`)
    .join("\n");
}

function drawScene() {
  guard($("answer"), () => {
    const scene = JSON.parse(explorer.draw_scene(BigInt($("seed").value), Number($("objects").value)));
    grid = scene.scene.grid;
    const img = new Image();
    img.onload = () => $("scene").getContext("2d").drawImage(img, 0, 0, 256, 256);
    img.src = pngUrl(explorer.scene_png());
    $("logprob").removeAttribute("src");
    $("avg").removeAttribute("src");
    const names = scene.scene.objects.map((o) => `${o.color} ${o.animal}`).join(", ");
    $("answer").textContent = `scene: ${names}`;
    selected = null;
    $("cell").textContent = "no cell selected";
    $("probe").textContent = "";
  });
}

function ask() {
  guard($("answer"), () => {
    const r = JSON.parse(explorer.ask_image($("question").value, $("target").value));
    $("logprob").src = pngUrl(explorer.heatmap_png("logprob"));
    $("avg").src = pngUrl(explorer.heatmap_png("avg-attention"));
    $("answer").textContent =
      `answer: ${r.answer}\nattributed: ${r.target.token} (log p = ${r.target_log_prob.toFixed(3)})\n` +
      `top heads:\n${headLines(r)}`;
    if (selected) probe();
  });
}

function probe() {
  if (!selected) return;
  const [row, col] = selected;
  $("cell").textContent = `cell (${row}, ${col})`;
  guard($("probe"), () => {
    const r = JSON.parse(explorer.probe_cell(row, col, Number($("layer").value), 8));
    const toks = r.result.projection.tokens;
    $("probe").textContent =
      `position ${r.result.position}, embedding space\n` +
      toks.map((t) => `  ${String(t.rank).padStart(2)}  ${t.token.padEnd(10)} ${t.logit.toFixed(3)}`).join("\n");
  });
}

function askText() {
  guard($("textanswer"), () => {
    const r = JSON.parse(explorer.ask_text($("context").value, $("tquestion").value));
    $("textanswer").textContent = `answer: ${r.answer}\ntop heads:\n${headLines(r)}`;
  });
}

await init();
explorer = new Explorer();
$("layer").max = explorer.layers() - 1;
$("draw").onclick = drawScene;
$("ask").onclick = ask;
$("asktext").onclick = askText;
$("layer").onchange = probe;
$("scene").onclick = (ev) => {
  if (!grid) return;
  const box = ev.target.getBoundingClientRect();
  const col = Math.floor(((ev.clientX - box.left) / box.width) * grid.cols);
  const row = Math.floor(((ev.clientY - box.top) / box.height) * grid.rows);
  selected = [row, col];
  probe();
};
drawScene();
