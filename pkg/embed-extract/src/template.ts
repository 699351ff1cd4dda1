/** Reader for the segmentation model's class-template files: one class per
 * line, `index<TAB>name<TAB>kind<TAB>parent<TAB>laterality<TAB>tier`,
 * `#` comments. Only index and name matter here. */

export interface ClassRow {
  index: number;
  name: string;
}

export function parseTemplate(text: string, source = "<string>"): ClassRow[] {
  const rows: ClassRow[] = [];
  const seen = new Set<number>();
  const lines = text.split(/\r?\n/);
  for (let i = 0; i < lines.length; i++) {
    const line = lines[i].split("#", 1)[0].trim();
    if (!line) continue;
    const parts = lines[i].split("#", 1)[0].split("\t");
    if (parts.length !== 6) {
      throw new Error(`${source}:${i + 1}: expected 6 tab-separated fields, got ${parts.length}`);
    }
    const index = Number(parts[0]);
    if (!Number.isInteger(index) || index < 1) {
      throw new Error(`${source}:${i + 1}: bad class index ${parts[0]}`);
    }
    if (seen.has(index)) {
      throw new Error(`${source}:${i + 1}: duplicate class index ${index}`);
    }
    seen.add(index);
    rows.push({ index, name: parts[1].trim() });
  }
  if (rows.length === 0) throw new Error(`${source}: no classes defined`);
  return rows.sort((a, b) => a.index - b.index);
}
