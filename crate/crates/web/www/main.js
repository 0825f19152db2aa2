import init, { phantomSlice, flopsTable, mvcSplit } from "./pkg/bertswin_web.js";

const SIZE = 32;
const $ = (id) => document.getElementById(id);

function guard(f) {
  return () => {
    try {
      f();
      $("err").textContent = "";
    } catch (e) {
      $("err").textContent = String(e);
    }
  };
}

const drawSlice = guard(() => {
  const px = phantomSlice(
    Number($("seed").value), SIZE, Number($("axis").value), Number($("index").value),
    $("left").checked, $("overlay").checked,
  );
  const img = new ImageData(new Uint8ClampedArray(px), SIZE, SIZE);
  $("slice").getContext("2d").putImageData(img, 0, 0);
});

const drawFlops = guard(() => {
  const volumes = $("volumes").value.split(",").map((s) => Number(s.trim())).filter((v) => v > 0);
  const report = JSON.parse(flopsTable(Uint32Array.from(volumes), Number($("patch").value)));
  const max = Math.max(...report.rows.map((r) => r.total));
  let html = "<table><tr><th>model</th><th>volume</th><th>GFLOPs</th><th></th></tr>";
  for (const r of report.rows) {
    const w = Math.max(1, (300 * r.total) / max);
    html += `<tr><td>${r.label}</td><td>${r.volume}</td><td>${r.total.toFixed(1)}</td>` +
      `<td style="text-align:left"><span class="bar" style="width:${w}px;background:#468"></span></td></tr>`;
  }
  html += "</table><p>";
  html += report.ratios.map((q) => `${q.volume}&sup3;: baseline / BertsWin = ${q.vit_over_bertswin.toFixed(2)}, cheapest ${q.cheaper}`).join("<br>");
  $("flops").innerHTML = html + "</p>";
});

const drawMvc = guard(() => {
  const c = JSON.parse(mvcSplit(Number($("gain").value), Number($("offset").value), Number($("noise").value), 7));
  const parts = [["brightness", "#c84"], ["contrast", "#4a8"], ["structure", "#48c"]];
  let html = `<p>MSE ${c.mse.toFixed(4)}</p><table>`;
  for (const [k, col] of parts) {
    const w = c.mse > 0 ? (300 * c[k]) / c.mse : 0;
    html += `<tr><td>${k}</td><td>${c[k].toFixed(4)}</td>` +
      `<td style="text-align:left"><span class="bar" style="width:${w}px;background:${col}"></span></td></tr>`;
  }
  $("mvc").innerHTML = html + "</table>";
});

await init();
for (const id of ["seed", "axis", "index", "left", "overlay"]) $(id).addEventListener("input", drawSlice);
for (const id of ["volumes", "patch"]) $(id).addEventListener("change", drawFlops);
for (const id of ["gain", "offset", "noise"]) $(id).addEventListener("input", drawMvc);
drawSlice();
drawFlops();
drawMvc();
