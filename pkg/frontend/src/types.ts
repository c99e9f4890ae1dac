/** Data model of the exported atlas file (format version 1). */

export interface AtlasBox {
  /** [x1, y1, x2, y2] in image pixels, origin top-left. */
  box: [number, number, number, number];
  concept: string;
  score: number;
}

export interface AtlasNode {
  id: string;
  uri: string | null;
  boxes: AtlasBox[];
  /** Per anchor: [x1, y1, x2, y2, score]; empty array when never detected. */
  anchors: number[][];
}

export interface BoxRef {
  image: string;
  box: number;
}

export interface AtlasEdge {
  source: BoxRef;
  target: BoxRef;
  similarity: number;
  /** [anchor id, partial inner product], sorted descending, at most 10. */
  contributions: [number, number][];
}

export interface AtlasGraph {
  nAnchors: number;
  nodes: AtlasNode[];
  edges: AtlasEdge[];
}

export interface ViewEntry {
  node: string;
  box: number | null;
  /** Source-box index of the edge followed to reach this entry, if any. */
  via: number | null;
}

export interface Overlays {
  boxes: boolean;
  contributions: boolean;
  scores: boolean;
}

/**
 * The whole UI state. The current node and highlighted box are the top of
 * the history stack, so following an edge and going back restores the
 * previous state exactly.
 */
export interface ViewState {
  history: ViewEntry[];
  overlays: Overlays;
}

export type NavResult =
  | { ok: true; state: ViewState }
  | { ok: false; reason: string; state: ViewState };
