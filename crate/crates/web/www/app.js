import init, { Demo, class_names } from "./pkg/lidargen_web.js";

const $ = (id) => document.getElementById(id);
let demo = null;

function show(svg) {
  $("view").innerHTML = svg;
}

function fail(e) {
  $("info").textContent = String(e);
}

function scan() {
  try {
    demo?.free();
    demo = new Demo($("cls").value, Number($("seed").value));
    $("t").max = demo.steps();
    $("t").value = 0;
    $("tval").textContent = "0";
    $("info").textContent = `${demo.points()} points`;
    show(demo.svg());
  } catch (e) {
    fail(e);
  }
}

await init();
for (const sel of [$("cls"), $("cls2")]) {
  for (const name of class_names()) sel.add(new Option(name, name));
}
$("scan").onclick = scan;
$("t").oninput = () => {
  if (!demo) return;
  $("tval").textContent = $("t").value;
  try { show(demo.noised_svg(Number($("t").value))); } catch (e) { fail(e); }
};
$("cmp").onclick = () => {
  if (!demo) return;
  try {
    const [cd, emd] = demo.compare($("cls2").value, Number($("seed2").value));
    $("dist").textContent = `CD ${cd.toFixed(4)}  EMD/pt ${emd.toFixed(4)}`;
  } catch (e) {
    fail(e);
  }
};
scan();
