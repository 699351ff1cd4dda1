#!/usr/bin/env node
/** extract-embeddings: run a prompt template over the class names of a
 * segmentation template file and write a UEMB1 embedding file.
 *
 *   extract-embeddings --classes classes32.tmpl --encoder onehot --out onehot.uemb
 *   extract-embeddings --classes classes32.tmpl --encoder clip \
 *       --template "A computerized tomography of a [CLS]" --out clipv3.uemb
 *
 * Exit codes: 0 success, 1 usage error, 2 runtime/encoder failure.
 */

import { readFileSync, writeFileSync } from "node:fs";

import { DEFAULT_MODELS, encoderStore, onehotStore } from "./encoders.js";
import { PRESETS, validateTemplate } from "./prompt.js";
import { parseTemplate } from "./template.js";
import { writeUemb } from "./uemb.js";

interface Args {
  classes: string;
  encoder: "clip" | "biobert" | "onehot";
  out: string;
  template: string;
  model?: string;
  dim?: number;
}

function usage(): void {
  console.error(
    "usage: extract-embeddings --classes <template.tmpl> " +
      "--encoder clip|biobert|onehot --out <file.uemb> " +
      '[--template "<prompt with [CLS]>" | --preset v1|v2|v3] ' +
      "[--model <id>] [--dim <n>]",
  );
}

export function parseArgs(argv: string[]): Args {
  const opts = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    if (!argv[i].startsWith("--") || i + 1 >= argv.length) {
      throw new Error(`bad argument ${argv[i]}`);
    }
    opts.set(argv[i].slice(2), argv[i + 1]);
  }
  const classes = opts.get("classes");
  const encoder = opts.get("encoder") as Args["encoder"];
  const out = opts.get("out");
  if (!classes || !out || !["clip", "biobert", "onehot"].includes(encoder)) {
    throw new Error("missing --classes/--encoder/--out");
  }
  let template = opts.get("template") ?? "";
  const preset = opts.get("preset");
  if (preset) {
    if (!(preset in PRESETS)) throw new Error(`unknown preset ${preset}`);
    template = PRESETS[preset];
  }
  if (!template) template = PRESETS.v3;
  if (encoder !== "onehot") validateTemplate(template);
  return {
    classes,
    encoder,
    out,
    template,
    model: opts.get("model"),
    dim: opts.has("dim") ? Number(opts.get("dim")) : undefined,
  };
}

export async function run(args: Args): Promise<void> {
  const classes = parseTemplate(readFileSync(args.classes, "utf-8"), args.classes);
  const store =
    args.encoder === "onehot"
      ? onehotStore(classes, args.dim)
      : await encoderStore(
          args.encoder,
          args.model ?? DEFAULT_MODELS[args.encoder],
          args.template,
          classes,
        );
  writeFileSync(args.out, writeUemb(store), "utf-8");
  console.error(
    `wrote ${store.vectors.size} embeddings (dim ${store.dim}, ` +
      `source ${store.source}) to ${args.out}`,
  );
}

export async function main(argv: string[]): Promise<number> {
  let args: Args;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    usage();
    return 1;
  }
  try {
    await run(args);
    return 0;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    if (args.encoder !== "onehot") {
      console.error(
        "(encoder checkpoints must be available locally or via the hub; " +
          "the one-hot mode never needs them)",
      );
    }
    return 2;
  }
}

const isDirectRun =
  process.argv[1] != null && import.meta.url === new URL(`file://${process.argv[1]}`).href;
if (isDirectRun) {
  main(process.argv.slice(2)).then((code) => {
    process.exitCode = code;
  });
}
