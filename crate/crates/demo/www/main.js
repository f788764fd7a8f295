import init, { Demo } from "./pkg/panoloc_demo.js";

const $ = (id) => document.getElementById(id);
let demo = null;
let layout = null;
let estimate = null;

function drawPanorama() {
  const frame = Number($("frame").value);
  const width = Number($("width").value);
  const rgba = demo.render(frame, width, $("mode").value);
  const canvas = $("pano");
  canvas.width = width;
  canvas.height = width / 2;
  const image = new ImageData(new Uint8ClampedArray(rgba), width, width / 2);
  canvas.getContext("2d").putImageData(image, 0, 0);
  $("frame-label").textContent = frame;
}

function drawMap() {
  const canvas = $("map");
  const ctx = canvas.getContext("2d");
  const [x0, z0] = layout.min;
  const [x1, z1] = layout.max;
  const scale = Math.min(canvas.width / (x1 - x0), canvas.height / (z1 - z0));
  const px = ([x, z]) => [(x - x0) * scale, canvas.height - (z - z0) * scale];
  ctx.fillStyle = "#f4f4f4";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  ctx.fillStyle = "#9aa7b8";
  for (const b of layout.buildings) {
    ctx.beginPath();
    b.footprint.forEach((c, i) => (i ? ctx.lineTo(...px(c)) : ctx.moveTo(...px(c))));
    ctx.fill();
  }
  const frame = Number($("frame").value);
  layout.cameras.forEach((c, i) => dot(ctx, px(c), i === frame ? 5 : 2, i === frame ? "#1d5fd1" : "#666"));
  if (estimate && estimate.frame === frame) dot(ctx, px(estimate.center), 4, "#d11d1d");
}

function dot(ctx, [x, y], r, color) {
  ctx.fillStyle = color;
  ctx.beginPath();
  ctx.arc(x, y, r, 0, 2 * Math.PI);
  ctx.fill();
}

function generate() {
  const seed = Number($("seed").value) >>> 0;
  const frames = Math.max(1, Math.min(500, Number($("frames").value)));
  $("status").textContent = "building city and instance map...";
  // let the status line paint before the synchronous work
  setTimeout(() => {
    try {
      demo?.free();
      demo = new Demo(seed, frames);
      layout = JSON.parse(demo.layout_json());
      estimate = null;
      $("frame").max = demo.frame_count - 1;
      $("frame").value = 0;
      $("status").textContent = `${layout.buildings.length} buildings, ${demo.frame_count} frames`;
      drawPanorama();
      drawMap();
    } catch (e) {
      $("status").textContent = `error: ${e}`;
    }
  }, 10);
}

function localize() {
  const frame = Number($("frame").value);
  try {
    const r = JSON.parse(
      demo.localize(frame, Number($("width").value), Number($("sigma").value), Number($("outliers").value),
        Number($("flips").value), Number($("seed").value) >>> 0),
    );
    const acc = r.pct_within_0_5m === null ? "n/a" : `${r.pct_within_0_5m.toFixed(1)}%`;
    if (r.ok) {
      estimate = { frame, center: r.center };
      $("result").textContent =
        `position error  ${r.dist_m.toFixed(3)} m\nrotation error  ${r.angle_deg.toFixed(3)} deg\n` +
        `inliers         ${r.inliers}\nbuilding pixels ${r.building_pixels}\ncoords within 0.5 m ${acc}`;
    } else {
      estimate = null;
      $("result").textContent = `failed: ${r.reason}\nbuilding pixels ${r.building_pixels}\ncoords within 0.5 m ${acc}`;
    }
  } catch (e) {
    $("result").textContent = `error: ${e}`;
  }
  drawMap();
}

await init();
$("generate").addEventListener("click", generate);
$("localize").addEventListener("click", localize);
for (const id of ["frame", "width", "mode"]) {
  $(id).addEventListener("input", () => {
    drawPanorama();
    drawMap();
  });
}
generate();
