// Four-step assignment wizard: general info, prompt, per-trait rubrics,
// per-trait models (defaults preselected by the service's default_for).
// Validation errors map to the offending field; submission issues the
// entity-creation calls in dependency order.

import { ApiClient, ApiRequestError } from "./api.js";
import type { ModelInfo, ServiceConfig } from "./types.js";

export type WizardStep = "general" | "prompt" | "rubrics" | "models";
export const STEP_ORDER: WizardStep[] = ["general", "prompt", "rubrics", "models"];

export interface GeneralInfo {
  title: string;
  language: string;
  essay_type: string;
  grade_level: string;
}

export interface PromptChoice {
  existingId?: string;
  create?: { title: string; body: string };
}

export interface WizardState {
  general: Partial<GeneralInfo>;
  prompt: PromptChoice;
  selectedTraits: string[];
  rubricByTrait: Record<string, { existingId?: string; createLevels?: [number, string][] }>;
  modelByTrait: Record<string, string>;
}

export class AssignmentWizard {
  step: WizardStep = "general";
  state: WizardState = {
    general: {},
    prompt: {},
    selectedTraits: [],
    rubricByTrait: {},
    modelByTrait: {},
  };
  fieldErrors: Record<string, string> = {};

  constructor(
    private api: ApiClient,
    readonly config: ServiceConfig,
  ) {}

  /** Scorable traits: the derived holistic trait needs no model choice. */
  get configurableTraits(): string[] {
    return this.config.traits.filter((t) => !t.derived).map((t) => t.name);
  }

  modelsForTrait(trait: string): ModelInfo[] {
    return this.config.models.filter((m) => m.enabled && m.supported_traits.includes(trait));
  }

  defaultModelFor(trait: string): string | undefined {
    return this.config.models.find((m) => m.enabled && m.default_for.includes(trait))?.id;
  }

  selectTraits(traits: string[]): void {
    this.state.selectedTraits = [...traits];
    for (const trait of traits) {
      if (!this.state.modelByTrait[trait]) {
        const preselected = this.defaultModelFor(trait);
        if (preselected) this.state.modelByTrait[trait] = preselected;
      }
    }
  }

  validateStep(step: WizardStep): Record<string, string> {
    const errors: Record<string, string> = {};
    if (step === "general") {
      const g = this.state.general;
      if (!g.title?.trim()) errors["title"] = "error_required";
      if (!g.language) errors["language"] = "error_required";
      if (!g.essay_type || !this.config.essay_types.includes(g.essay_type))
        errors["essay_type"] = "error_required";
      if (!g.grade_level) errors["grade_level"] = "error_required";
    } else if (step === "prompt") {
      const p = this.state.prompt;
      if (!p.existingId && !p.create?.body?.trim()) errors["prompt"] = "error_required";
    } else if (step === "rubrics") {
      if (this.state.selectedTraits.length === 0) errors["traits"] = "error_required";
      for (const trait of this.state.selectedTraits) {
        const choice = this.state.rubricByTrait[trait];
        if (!choice?.existingId && !choice?.createLevels?.length)
          errors[`rubric.${trait}`] = "error_rubric_missing";
      }
    } else if (step === "models") {
      for (const trait of this.state.selectedTraits) {
        if (!this.state.modelByTrait[trait]) errors[`model.${trait}`] = "error_required";
      }
    }
    this.fieldErrors = errors;
    return errors;
  }

  next(): boolean {
    if (Object.keys(this.validateStep(this.step)).length > 0) return false;
    const i = STEP_ORDER.indexOf(this.step);
    if (i < STEP_ORDER.length - 1) this.step = STEP_ORDER[i + 1];
    return true;
  }

  back(): void {
    const i = STEP_ORDER.indexOf(this.step);
    if (i > 0) this.step = STEP_ORDER[i - 1];
  }

  /** Create prompt / rubrics as needed, then the assignment itself. */
  async submit(): Promise<string> {
    for (const step of STEP_ORDER) {
      if (Object.keys(this.validateStep(step)).length > 0) {
        throw new Error(`step ${step} has validation errors`);
      }
    }
    let promptId = this.state.prompt.existingId;
    try {
      if (!promptId) {
        const create = this.state.prompt.create!;
        const created = await this.api.createPrompt({
          title: create.title,
          body: create.body,
          language: this.state.general.language,
          essay_type: this.state.general.essay_type,
          grade_level: this.state.general.grade_level,
        });
        promptId = created.id;
      }
      const traitConfig: Record<string, [string, string]> = {};
      for (const trait of this.state.selectedTraits) {
        const rubricChoice = this.state.rubricByTrait[trait];
        let rubricId = rubricChoice.existingId;
        if (!rubricId) {
          const created = await this.api.createRubric({
            trait,
            levels: rubricChoice.createLevels,
            language: this.state.general.language,
            title: `${this.state.general.title} / ${trait}`,
          });
          rubricId = created.id;
        }
        traitConfig[trait] = [rubricId, this.state.modelByTrait[trait]];
      }
      const assignment = await this.api.createAssignment({
        title: this.state.general.title,
        language: this.state.general.language,
        essay_type: this.state.general.essay_type,
        grade_level: this.state.general.grade_level,
        prompt_id: promptId,
        trait_config: traitConfig,
      });
      return assignment.id;
    } catch (err) {
      if (err instanceof ApiRequestError && err.body.code === "validation_failed") {
        this.fieldErrors = { _server: err.body.message };
      }
      throw err;
    }
  }
}
