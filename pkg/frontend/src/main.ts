/** Bootstrapping: load an atlas file (picker or ?graph= url), then run the
 * event loop over the pure state machine. */

import { AtlasFormatError, parseAtlas } from "./graph.js";
import { followEdge, goBack, initialState, selectNode, toggleOverlay } from "./state.js";
import { render, showBanner, ViewerDom } from "./render.js";
import type { AtlasGraph, Overlays, ViewState } from "./types.js";

function grabDom(): ViewerDom {
  const get = (id: string) => {
    const el = document.getElementById(id);
    if (!el) throw new Error(`missing element #${id}`);
    return el;
  };
  return {
    banner: get("banner"),
    gallery: get("gallery"),
    canvas: get("scene") as HTMLCanvasElement,
    sidebar: get("sidebar"),
    backButton: get("back") as HTMLButtonElement,
    toggles: {
      boxes: get("toggle-boxes") as HTMLInputElement,
      contributions: get("toggle-contributions") as HTMLInputElement,
      scores: get("toggle-scores") as HTMLInputElement,
    },
  };
}

function start(graph: AtlasGraph, dom: ViewerDom, baseUrl: string): void {
  let state: ViewState = initialState(graph);

  const repaint = () => {
    render(graph, state, dom, baseUrl, onBoxClick, onNodeClick);
  };

  const onBoxClick = (box: number) => {
    const result = followEdge(graph, state, box);
    if (result.ok) {
      showBanner(dom, null);
      state = result.state;
    } else {
      showBanner(dom, result.reason);
    }
    repaint();
  };

  const onNodeClick = (id: string) => {
    const result = selectNode(graph, state, id);
    if (result.ok) {
      showBanner(dom, null);
      state = result.state;
    } else {
      showBanner(dom, result.reason);
    }
    repaint();
  };

  dom.backButton.onclick = () => {
    state = goBack(state);
    repaint();
  };
  for (const key of Object.keys(dom.toggles) as (keyof Overlays)[]) {
    dom.toggles[key].checked = state.overlays[key];
    dom.toggles[key].onchange = () => {
      state = toggleOverlay(state, key);
      repaint();
    };
  }
  if (graph.edges.length === 0) {
    showBanner(dom, "this atlas has no match edges: navigation is disabled");
  }
  repaint();
}

function loadPayload(dom: ViewerDom, payload: unknown, baseUrl: string): void {
  try {
    const graph = parseAtlas(payload);
    showBanner(dom, null);
    start(graph, dom, baseUrl);
  } catch (err) {
    if (err instanceof AtlasFormatError) {
      showBanner(dom, `cannot load atlas: ${err.message}`);
    } else {
      throw err;
    }
  }
}

export function boot(): void {
  const dom = grabDom();
  const picker = document.getElementById("file") as HTMLInputElement | null;
  if (picker) {
    picker.onchange = async () => {
      const file = picker.files?.[0];
      if (!file) return;
      try {
        loadPayload(dom, JSON.parse(await file.text()), file.name);
      } catch (err) {
        showBanner(dom, `cannot parse ${file.name}: ${err}`);
      }
    };
  }
  const url = new URLSearchParams(window.location.search).get("graph");
  if (url) {
    fetch(url)
      .then((r) => r.json())
      .then((payload) => loadPayload(dom, payload, url))
      .catch((err) => showBanner(dom, `cannot fetch ${url}: ${err}`));
  }
}

if (typeof window !== "undefined" && typeof document !== "undefined") {
  window.addEventListener("DOMContentLoaded", boot);
}
