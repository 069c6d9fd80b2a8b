// Built by `wasm-bindgen --target web --out-dir www/pkg`.
import init, { Scene, normalize_gray, pnp_trial } from "./pkg/topoloc_web.js";

const $ = (id) => document.getElementById(id);
const value = (id) => Number($(id).value);

function showValues() {
  for (const input of document.querySelectorAll("input[type=range]")) {
    input.nextElementSibling.textContent = input.value;
  }
}

function drawGray(canvas, pixels, width, height) {
  canvas.width = width;
  canvas.height = height;
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(width, height);
  for (let i = 0; i < pixels.length; i++) {
    img.data[4 * i] = img.data[4 * i + 1] = img.data[4 * i + 2] = pixels[i];
    img.data[4 * i + 3] = 255;
  }
  ctx.putImageData(img, 0, 0);
}

function report(err) {
  $("status").textContent = String(err);
  $("status").className = "error";
}

let scene;
let userImage = null;

function updateNormalize() {
  const window = value("n-window");
  if (userImage) {
    const { pixels, width, height } = userImage;
    drawGray($("n-raw"), pixels, width, height);
    drawGray($("n-out"), normalize_gray(pixels, width, height, window, 1e-3), width, height);
    return;
  }
  const args = [value("n-s"), value("n-offset"), value("n-gain"), value("n-bias")];
  const w = scene.width(), h = scene.height();
  drawGray($("n-raw"), scene.render(...args), w, h);
  drawGray($("n-out"), scene.render_normalized(...args, window, 1e-3), w, h);
}

function loadUserImage(file) {
  const bitmap = new Image();
  bitmap.onload = () => {
    const c = document.createElement("canvas");
    c.width = bitmap.width;
    c.height = bitmap.height;
    const ctx = c.getContext("2d");
    ctx.drawImage(bitmap, 0, 0);
    const rgba = ctx.getImageData(0, 0, c.width, c.height).data;
    const gain = value("n-gain"), bias = value("n-bias");
    const pixels = new Uint8Array(c.width * c.height);
    for (let i = 0; i < pixels.length; i++) {
      const y = (0.299 * rgba[4 * i] + 0.587 * rgba[4 * i + 1] + 0.114 * rgba[4 * i + 2]) / 255;
      pixels[i] = Math.round(255 * Math.min(1, Math.max(0, gain * y + bias)));
    }
    userImage = { pixels, width: c.width, height: c.height };
    run(updateNormalize);
  };
  bitmap.src = URL.createObjectURL(file);
}

function updatePnp() {
  const t = pnp_trial(value("p-points"), value("p-outliers"), value("p-noise"), value("p-threshold"), BigInt(value("p-seed")));
  const obs = t.observations(), rep = t.reprojections();
  const truth = t.true_inliers(), found = t.found_inliers();
  const ctx = $("p-canvas").getContext("2d");
  ctx.clearRect(0, 0, 640, 480);
  for (let i = 0; i < truth.length; i++) {
    const [u, v] = [obs[2 * i], obs[2 * i + 1]];
    if (rep.length) {
      ctx.strokeStyle = "#888";
      ctx.beginPath();
      ctx.moveTo(u, v);
      ctx.lineTo(rep[2 * i], rep[2 * i + 1]);
      ctx.stroke();
    }
    ctx.fillStyle = found[i] ? (truth[i] ? "#1a9641" : "#fdae61") : "#d7191c";
    ctx.beginPath();
    ctx.arc(u, v, 3, 0, 2 * Math.PI);
    ctx.fill();
  }
  $("pnp-stats").textContent = t.solved()
    ? `translation error  ${t.translation_error().toFixed(4)} m\n` +
      `rotation error     ${t.rotation_error_deg().toFixed(4)}°\n` +
      `inlier recall      ${(100 * t.inlier_recall()).toFixed(1)} %\n` +
      `kept               ${found.reduce((a, b) => a + b, 0)} / ${found.length}\n` +
      `hypotheses         ${t.iterations()}`
    : "no pose found";
  t.free();
}

function updateNodes() {
  const canvas = $("m-canvas");
  const ctx = canvas.getContext("2d");
  const nodes = scene.node_positions(value("m-d"), value("m-lambda"));
  const landmarks = scene.landmarks_xy(), path = scene.path_xy(1);
  // The world spans 120 x 40 m around the origin.
  const scale = Math.min(canvas.width / 124, canvas.height / 44);
  const px = (x, y) => [canvas.width / 2 + x * scale, canvas.height / 2 - y * scale];
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.fillStyle = "#bbb";
  for (let i = 0; i < landmarks.length; i += 2) {
    const [x, y] = px(landmarks[i], landmarks[i + 1]);
    ctx.fillRect(x, y, 1.5, 1.5);
  }
  ctx.strokeStyle = "#2b83ba";
  ctx.beginPath();
  for (let i = 0; i < path.length; i += 2) {
    const [x, y] = px(path[i], path[i + 1]);
    i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
  }
  ctx.stroke();
  ctx.fillStyle = "#d7191c";
  for (let i = 0; i < nodes.length; i += 2) {
    const [x, y] = px(nodes[i], nodes[i + 1]);
    ctx.beginPath();
    ctx.arc(x, y, 4, 0, 2 * Math.PI);
    ctx.fill();
  }
  $("nodes-stats").textContent = `${nodes.length / 2} nodes over ${scene.path_length().toFixed(1)} m`;
}

function run(f) {
  try {
    f();
  } catch (e) {
    report(e);
  }
}

async function main() {
  await init();
  scene = new Scene(7n);
  $("n-s").max = Math.floor(scene.path_length());
  $("status").textContent = "";
  showValues();
  for (const input of document.querySelectorAll("input[type=range]")) {
    const section = input.closest("section").id;
    const update = { normalize: updateNormalize, pnp: updatePnp, nodes: updateNodes }[section];
    input.addEventListener("input", () => {
      showValues();
      run(update);
    });
  }
  $("n-file").addEventListener("change", (e) => e.target.files[0] && loadUserImage(e.target.files[0]));
  for (const f of [updateNormalize, updatePnp, updateNodes]) run(f);
}

main().catch(report);
