/** The three embedding producers. One-hot needs nothing; CLIP and BioBERT
 * load a pretrained text encoder through @xenova/transformers, which must
 * have the checkpoint available (cache or hub reachability). */

import type { ClassRow } from "./template.js";
import { renderPrompt } from "./prompt.js";
import { l2normalize, type EmbeddingStore } from "./uemb.js";

export const DEFAULT_MODELS: Record<string, string> = {
  clip: "Xenova/clip-vit-base-patch16",
  biobert: "dmis-lab/biobert-base-cased-v1.2",
};

export function onehotStore(classes: ClassRow[], dim?: number): EmbeddingStore {
  const d = dim ?? Math.max(...classes.map((c) => c.index));
  const vectors = new Map<number, Float64Array>();
  for (const c of classes) {
    if (c.index > d) {
      throw new Error(`class ${c.index} exceeds one-hot dim ${d}`);
    }
    const v = new Float64Array(d);
    v[c.index - 1] = 1.0;
    vectors.set(c.index, v);
  }
  return { dim: d, source: "one-hot", vectors };
}

export async function encoderStore(
  encoder: "clip" | "biobert",
  model: string,
  template: string,
  classes: ClassRow[],
): Promise<EmbeddingStore> {
  // dynamic import so the one-hot path never touches the heavy dependency
  const { pipeline } = await import("@xenova/transformers");
  const extract = await pipeline("feature-extraction", model, { quantized: true });
  const vectors = new Map<number, Float64Array>();
  let dim = 0;
  for (const c of classes) {
    const out = await extract(renderPrompt(template, c.name), {
      pooling: "mean",
      normalize: false,
    });
    const v = l2normalize(Float64Array.from(out.data as Float32Array));
    dim = v.length;
    vectors.set(c.index, v);
  }
  return { dim, source: `${encoder}:${model}:l2`, vectors };
}
