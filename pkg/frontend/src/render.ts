/** DOM rendering: a gallery of nodes, a canvas view of the current image
 * with overlaid boxes, and a contributions panel. Looks only at the
 * loaded graph and the view state; never computes embeddings. */

import { nodeById, resolveUri } from "./graph.js";
import { canGoBack, currentEntry, followedEdge, tooltipFor } from "./state.js";
import type { AtlasGraph, AtlasNode, ViewState } from "./types.js";

const CONCEPT_COLORS = ["#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#a65628"];

export interface ViewerDom {
  banner: HTMLElement;
  gallery: HTMLElement;
  canvas: HTMLCanvasElement;
  sidebar: HTMLElement;
  backButton: HTMLButtonElement;
  toggles: Record<string, HTMLInputElement>;
}

export function showBanner(dom: ViewerDom, message: string | null): void {
  dom.banner.textContent = message ?? "";
  dom.banner.style.display = message ? "block" : "none";
}

function conceptColor(graph: AtlasGraph, concept: string): string {
  const concepts = [...new Set(graph.nodes.flatMap((n) => n.boxes.map((b) => b.concept)))].sort();
  return CONCEPT_COLORS[Math.max(0, concepts.indexOf(concept)) % CONCEPT_COLORS.length];
}

function drawScene(
  graph: AtlasGraph,
  state: ViewState,
  node: AtlasNode,
  canvas: HTMLCanvasElement,
  image: HTMLImageElement | null,
  onBoxClick: (box: number) => void,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const extent = node.boxes
    .flatMap((b) => [b.box[2], b.box[3]])
    .concat(node.anchors.filter((a) => a.length === 5).flatMap((a) => [a[2], a[3]]));
  const w = image?.naturalWidth || Math.max(128, ...extent);
  const h = image?.naturalHeight || Math.max(128, ...extent);
  const scale = Math.min(canvas.width / w, canvas.height / h);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (image) {
    ctx.drawImage(image, 0, 0, w * scale, h * scale);
  } else {
    ctx.fillStyle = "#2b2b33";
    ctx.fillRect(0, 0, w * scale, h * scale);
    ctx.fillStyle = "#777";
    ctx.font = "12px sans-serif";
    ctx.fillText(`${node.id} (no image)`, 8, 16);
  }
  const entry = currentEntry(state);
  if (state.overlays.contributions) {
    const edge = followedEdge(graph, state);
    if (edge) {
      ctx.setLineDash([6, 4]);
      ctx.strokeStyle = "#cccc55";
      ctx.lineWidth = 1.5;
      for (const [anchorId] of edge.contributions.slice(0, 3)) {
        const a = node.anchors[anchorId];
        if (a && a.length === 5) {
          ctx.strokeRect(a[0] * scale, a[1] * scale, (a[2] - a[0]) * scale, (a[3] - a[1]) * scale);
        }
      }
      ctx.setLineDash([]);
    }
  }
  if (state.overlays.boxes) {
    node.boxes.forEach((b, i) => {
      const [x1, y1, x2, y2] = b.box;
      ctx.strokeStyle = conceptColor(graph, b.concept);
      ctx.lineWidth = entry.box === i ? 3 : 1.5;
      ctx.strokeRect(x1 * scale, y1 * scale, (x2 - x1) * scale, (y2 - y1) * scale);
      if (state.overlays.scores) {
        ctx.fillStyle = ctx.strokeStyle;
        ctx.font = "11px sans-serif";
        ctx.fillText(`${b.concept} ${b.score.toFixed(2)}`, x1 * scale + 2, y1 * scale - 3);
      }
    });
  }
  canvas.onclick = (ev) => {
    const rect = canvas.getBoundingClientRect();
    const x = (ev.clientX - rect.left) / scale;
    const y = (ev.clientY - rect.top) / scale;
    let best = -1;
    let bestArea = Infinity;
    node.boxes.forEach((b, i) => {
      const [x1, y1, x2, y2] = b.box;
      const area = (x2 - x1) * (y2 - y1);
      if (x >= x1 && x <= x2 && y >= y1 && y <= y2 && area < bestArea) {
        best = i;
        bestArea = area;
      }
    });
    if (best >= 0) onBoxClick(best);
  };
}

export function render(
  graph: AtlasGraph,
  state: ViewState,
  dom: ViewerDom,
  baseUrl: string,
  onBoxClick: (box: number) => void,
  onNodeClick: (id: string) => void,
): void {
  const entry = currentEntry(state);
  dom.backButton.disabled = !canGoBack(state);

  dom.gallery.replaceChildren(
    ...graph.nodes.map((node) => {
      const item = document.createElement("button");
      item.className = "gallery-item" + (node.id === entry.node ? " active" : "");
      item.textContent = `${node.id} (${node.boxes.length} boxes)`;
      item.onclick = () => onNodeClick(node.id);
      return item;
    }),
  );

  const node = nodeById(graph, entry.node);
  if (!node) return;
  const uri = resolveUri(baseUrl, node.uri);
  if (uri) {
    const image = new Image();
    image.onload = () => drawScene(graph, state, node, dom.canvas, image, onBoxClick);
    image.onerror = () => drawScene(graph, state, node, dom.canvas, null, onBoxClick);
    image.src = uri;
  } else {
    drawScene(graph, state, node, dom.canvas, null, onBoxClick);
  }

  const lines: string[] = [`image: ${node.id}`];
  if (entry.box !== null) {
    lines.push(...tooltipFor(graph, state, entry.node, entry.box));
  }
  const edge = followedEdge(graph, state);
  const panel = [lines.join("\n")];
  if (edge && state.overlays.contributions) {
    panel.push(
      "top contributing anchors:",
      ...edge.contributions.map(([a, v]) => `  anchor ${a}: ${v}`),
    );
  }
  if (graph.edges.length === 0) {
    panel.push("(no edges in this atlas: navigation disabled)");
  }
  dom.sidebar.textContent = panel.join("\n");
}
