/** Prompt templates. A template must contain exactly one `[CLS]`
 * placeholder, which is replaced by the class name. */

export const PRESETS: Record<string, string> = {
  // the three CLIP prompt variants plus the medical one used for BioBERT
  v1: "A photo of a [CLS]",
  v2: "There is [CLS] in this computerized tomography",
  v3: "A computerized tomography of a [CLS]",
};

export function validateTemplate(template: string): void {
  const hits = template.split("[CLS]").length - 1;
  if (hits !== 1) {
    throw new Error(
      `template must contain exactly one [CLS] placeholder, found ${hits}: "${template}"`,
    );
  }
}

export function renderPrompt(template: string, className: string): string {
  validateTemplate(template);
  return template.replace("[CLS]", className);
}
