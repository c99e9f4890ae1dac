/** Pure navigation over a loaded atlas. The graph is never mutated; every
 * transition returns a fresh state, and the history stack's top entry IS
 * the current view, so push/pop round-trips restore state exactly. */

import { edgeFrom, nodeById } from "./graph.js";
import type { AtlasEdge, AtlasGraph, NavResult, Overlays, ViewEntry, ViewState } from "./types.js";

export function initialState(graph: AtlasGraph): ViewState {
  return {
    history: [{ node: graph.nodes[0].id, box: null, via: null }],
    overlays: { boxes: true, contributions: true, scores: true },
  };
}

export function currentEntry(state: ViewState): ViewEntry {
  return state.history[state.history.length - 1];
}

/** Follow a part box's outgoing edge to its best match in another image.
 * Pushes exactly one history entry; on any problem the state is returned
 * unchanged with a reason for the banner. */
export function followEdge(graph: AtlasGraph, state: ViewState, box: number): NavResult {
  const here = currentEntry(state);
  const edge = edgeFrom(graph, here.node, box);
  if (!edge) {
    return { ok: false, reason: `box ${box} of ${here.node} has no outgoing edge`, state };
  }
  const target = nodeById(graph, edge.target.image);
  if (!target || edge.target.box >= target.boxes.length) {
    return { ok: false, reason: `dangling edge to ${edge.target.image}`, state };
  }
  return {
    ok: true,
    state: {
      ...state,
      history: [...state.history, { node: edge.target.image, box: edge.target.box, via: box }],
    },
  };
}

/** Pop exactly one step; at the root the state is unchanged. */
export function goBack(state: ViewState): ViewState {
  if (state.history.length <= 1) return state;
  return { ...state, history: state.history.slice(0, -1) };
}

export function canGoBack(state: ViewState): boolean {
  return state.history.length > 1;
}

/** Jump to a node from the gallery (pushes history like any navigation). */
export function selectNode(graph: AtlasGraph, state: ViewState, id: string): NavResult {
  if (!nodeById(graph, id)) {
    return { ok: false, reason: `unknown image ${id}`, state };
  }
  return {
    ok: true,
    state: { ...state, history: [...state.history, { node: id, box: null, via: null }] },
  };
}

export function toggleOverlay(state: ViewState, key: keyof Overlays): ViewState {
  return { ...state, overlays: { ...state.overlays, [key]: !state.overlays[key] } };
}

/** The edge behind the current highlight, when the view was reached by
 * following one (used to list anchor contributions verbatim). */
export function followedEdge(graph: AtlasGraph, state: ViewState): AtlasEdge | undefined {
  if (state.history.length < 2) return undefined;
  const here = currentEntry(state);
  const prev = state.history[state.history.length - 2];
  if (here.box === null || here.via === null) return undefined;
  return graph.edges.find(
    (e) =>
      e.source.image === prev.node &&
      e.source.box === here.via &&
      e.target.image === here.node &&
      e.target.box === here.box,
  );
}

/** Tooltip lines for a box: stored values verbatim, nothing recomputed. */
export function tooltipFor(graph: AtlasGraph, state: ViewState, image: string, box: number): string[] {
  const node = nodeById(graph, image);
  if (!node || box >= node.boxes.length) return [];
  const b = node.boxes[box];
  const lines = [`concept: ${b.concept}`, `score: ${b.score}`];
  const edge = edgeFrom(graph, image, box);
  if (edge) {
    lines.push(`similarity: ${edge.similarity}`);
  }
  return lines;
}
