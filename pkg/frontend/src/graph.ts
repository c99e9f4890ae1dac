/** Loading and validating atlas files. Validation is all-or-nothing: a
 * schema violation throws before anything is handed to the renderer. */

import type { AtlasBox, AtlasEdge, AtlasGraph, AtlasNode, BoxRef } from "./types.js";

export const SUPPORTED_VERSION = 1;

export class AtlasFormatError extends Error {}

function fail(message: string): never {
  throw new AtlasFormatError(message);
}

function isRecord(value: unknown): value is Record<string, unknown> {
  return typeof value === "object" && value !== null && !Array.isArray(value);
}

function asNumber(value: unknown, where: string): number {
  if (typeof value !== "number" || !Number.isFinite(value)) {
    fail(`${where}: expected a finite number, got ${JSON.stringify(value)}`);
  }
  return value;
}

function asBox4(value: unknown, where: string): [number, number, number, number] {
  if (!Array.isArray(value) || value.length !== 4) {
    fail(`${where}: expected [x1, y1, x2, y2]`);
  }
  const coords = value.map((v, i) => asNumber(v, `${where}[${i}]`));
  if (!(coords[2] > coords[0] && coords[3] > coords[1])) {
    fail(`${where}: box must have positive area`);
  }
  return coords as [number, number, number, number];
}

function parseBox(value: unknown, where: string): AtlasBox {
  if (!isRecord(value)) fail(`${where}: expected an object`);
  if (typeof value.concept !== "string" || !value.concept) {
    fail(`${where}: missing concept`);
  }
  return {
    box: asBox4(value.box, `${where}.box`),
    concept: value.concept,
    score: asNumber(value.score, `${where}.score`),
  };
}

function parseNode(value: unknown, index: number): AtlasNode {
  const where = `nodes[${index}]`;
  if (!isRecord(value)) fail(`${where}: expected an object`);
  if (typeof value.id !== "string" || !value.id) fail(`${where}: missing id`);
  const uri = value.uri == null ? null : String(value.uri);
  if (!Array.isArray(value.boxes)) fail(`${where}: missing boxes array`);
  const boxes = value.boxes.map((b, i) => parseBox(b, `${where}.boxes[${i}]`));
  const anchorsRaw = value.anchors ?? [];
  if (!Array.isArray(anchorsRaw)) fail(`${where}: anchors must be an array`);
  const anchors = anchorsRaw.map((a, i) => {
    if (!Array.isArray(a)) fail(`${where}.anchors[${i}]: expected an array`);
    if (a.length !== 0 && a.length !== 5) {
      fail(`${where}.anchors[${i}]: expected [] or [x1, y1, x2, y2, score]`);
    }
    return a.map((v, j) => asNumber(v, `${where}.anchors[${i}][${j}]`));
  });
  return { id: value.id, uri, boxes, anchors };
}

function parseBoxRef(value: unknown, where: string): BoxRef {
  if (!isRecord(value)) fail(`${where}: expected an object`);
  if (typeof value.image !== "string") fail(`${where}: missing image id`);
  const box = asNumber(value.box, `${where}.box`);
  if (!Number.isInteger(box) || box < 0) fail(`${where}: box must be a non-negative integer`);
  return { image: value.image, box };
}

function parseEdge(value: unknown, index: number, nodes: Map<string, AtlasNode>): AtlasEdge {
  const where = `edges[${index}]`;
  if (!isRecord(value)) fail(`${where}: expected an object`);
  const source = parseBoxRef(value.source, `${where}.source`);
  const target = parseBoxRef(value.target, `${where}.target`);
  for (const [label, ref] of [["source", source], ["target", target]] as const) {
    const node = nodes.get(ref.image);
    if (!node) fail(`${where}.${label}: unknown image ${ref.image}`);
    if (ref.box >= node.boxes.length) {
      fail(`${where}.${label}: box ${ref.box} out of range for ${ref.image}`);
    }
  }
  const similarity = asNumber(value.similarity, `${where}.similarity`);
  if (!Array.isArray(value.contributions)) fail(`${where}: missing contributions`);
  if (value.contributions.length > 10) {
    fail(`${where}: more than 10 contributions stored`);
  }
  const contributions = value.contributions.map((c, i) => {
    if (!Array.isArray(c) || c.length !== 2) {
      fail(`${where}.contributions[${i}]: expected [anchor, value]`);
    }
    const anchor = asNumber(c[0], `${where}.contributions[${i}][0]`);
    if (!Number.isInteger(anchor) || anchor < 0) {
      fail(`${where}.contributions[${i}]: anchor id must be a non-negative integer`);
    }
    return [anchor, asNumber(c[1], `${where}.contributions[${i}][1]`)] as [number, number];
  });
  for (let i = 1; i < contributions.length; i++) {
    if (contributions[i][1] > contributions[i - 1][1]) {
      fail(`${where}: contributions must be sorted descending`);
    }
  }
  return { source, target, similarity, contributions };
}

/** Parse and fully validate an atlas payload; throws AtlasFormatError. */
export function parseAtlas(payload: unknown): AtlasGraph {
  if (!isRecord(payload)) fail("atlas file: expected a JSON object");
  if (payload.version !== SUPPORTED_VERSION) {
    fail(`atlas file: unsupported format version ${JSON.stringify(payload.version)}`);
  }
  if (payload.kind !== "atlas-graph") {
    fail(`atlas file: expected kind "atlas-graph", got ${JSON.stringify(payload.kind)}`);
  }
  if (!Array.isArray(payload.nodes) || payload.nodes.length === 0) {
    fail("atlas file: needs a non-empty nodes array");
  }
  const nodes = payload.nodes.map(parseNode);
  const byId = new Map<string, AtlasNode>();
  for (const node of nodes) {
    if (byId.has(node.id)) fail(`atlas file: duplicate node id ${node.id}`);
    byId.set(node.id, node);
  }
  const edgesRaw = Array.isArray(payload.edges) ? payload.edges : fail("atlas file: missing edges array");
  const edges = edgesRaw.map((e, i) => parseEdge(e, i, byId));
  const nAnchors = typeof payload.n_anchors === "number" ? payload.n_anchors : 0;
  return { nAnchors, nodes, edges };
}

export function nodeById(graph: AtlasGraph, id: string): AtlasNode | undefined {
  return graph.nodes.find((n) => n.id === id);
}

/** The outgoing edge of a box, if any (at most one per box by export). */
export function edgeFrom(graph: AtlasGraph, image: string, box: number): AtlasEdge | undefined {
  return graph.edges.find((e) => e.source.image === image && e.source.box === box);
}

export function hasEdges(graph: AtlasGraph): boolean {
  return graph.edges.length > 0;
}

/** Resolve an image uri relative to the directory the graph was loaded from. */
export function resolveUri(baseUrl: string, uri: string | null): string | null {
  if (uri === null) return null;
  if (/^(https?:)?\/\//.test(uri) || uri.startsWith("data:")) return uri;
  const cut = baseUrl.lastIndexOf("/");
  return cut >= 0 ? `${baseUrl.slice(0, cut + 1)}${uri}` : uri;
}
