/** UEMB1 text format: header `UEMB1 <dim> <source>`, then one
 * `<class_index> <v1> ... <vdim>` line per class. Values are written with
 * 9 significant digits in the same shortest-form style the consumer's
 * writer uses, so identical vectors round-trip to identical files. */

export interface EmbeddingStore {
  dim: number;
  source: string;
  vectors: Map<number, Float64Array>;
}

/** Format like printf %.9g: 9 significant digits, trailing zeros trimmed,
 * scientific notation when the (rounded) exponent is < -4 or >= 9. */
export function formatG9(x: number): string {
  if (x === 0) return Object.is(x, -0) ? "-0" : "0";
  if (!Number.isFinite(x)) throw new Error(`non-finite embedding value ${x}`);
  // toExponential gives the correctly rounded 9-digit mantissa + exponent
  const sci = x.toExponential(8);
  const exp = parseInt(sci.slice(sci.indexOf("e") + 1), 10);
  if (exp < -4 || exp >= 9) {
    let out = sci.replace(/\.?0+e/, "e");
    return out.replace(/e([+-])(\d)$/, "e$10$2"); // pad: 1e-7 -> 1e-07
  }
  let out = x.toFixed(8 - exp);
  if (out.includes(".")) out = out.replace(/\.?0+$/, "");
  return out;
}

export function writeUemb(store: EmbeddingStore): string {
  const lines = [`UEMB1 ${store.dim} ${store.source}`];
  const classes = [...store.vectors.keys()].sort((a, b) => a - b);
  for (const cls of classes) {
    const v = store.vectors.get(cls)!;
    if (v.length !== store.dim) {
      throw new Error(`class ${cls}: vector length ${v.length} != dim ${store.dim}`);
    }
    lines.push(`${cls} ${[...v].map(formatG9).join(" ")}`);
  }
  return lines.join("\n") + "\n";
}

export function parseUemb(text: string, source = "<string>"): EmbeddingStore {
  const lines = text.split(/\r?\n/);
  const header = lines[0]?.trim().split(/\s+/) ?? [];
  if (header[0] !== "UEMB1" || header.length < 2) {
    throw new Error(`${source}: missing UEMB1 header`);
  }
  const dim = Number(header[1]);
  const store: EmbeddingStore = {
    dim,
    source: header[2] ?? "unknown",
    vectors: new Map(),
  };
  for (let i = 1; i < lines.length; i++) {
    const line = lines[i].trim();
    if (!line || line.startsWith("#")) continue;
    const parts = line.split(/\s+/);
    if (parts.length !== dim + 1) {
      throw new Error(`${source}:${i + 1}: expected ${dim} values, got ${parts.length - 1}`);
    }
    store.vectors.set(Number(parts[0]), Float64Array.from(parts.slice(1), Number));
  }
  return store;
}

export function l2normalize(v: Float64Array): Float64Array {
  let norm = 0;
  for (const x of v) norm += x * x;
  norm = Math.sqrt(norm);
  if (norm === 0) return v;
  return Float64Array.from(v, (x) => x / norm);
}

export function cosine(a: Float64Array, b: Float64Array): number {
  let dot = 0;
  let na = 0;
  let nb = 0;
  for (let i = 0; i < a.length; i++) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / Math.sqrt(na * nb);
}
