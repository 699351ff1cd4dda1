// Minimal ambient typing for the optional encoder dependency: it may be
// absent at build and runtime (the one-hot path never needs it), so the
// real package types cannot be relied on.
declare module "@xenova/transformers" {
  export function pipeline(
    task: string,
    model?: string,
    options?: Record<string, unknown>,
  ): Promise<(input: string, options?: Record<string, unknown>) => Promise<{ data: Float32Array | number[] }>>;
}
