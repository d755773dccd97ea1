// Review screen: scoring history browser with side-by-side run comparison,
// an inline refinement editor constrained to each trait's range, run
// deletion, and report download. Range limits come from the service config;
// out-of-range input never reaches the wire (and the server re-validates).

import { ApiClient } from "./api.js";
import type {
  EssayWire,
  FinalizedMap,
  ReportDocument,
  RunSnapshot,
  ServiceConfig,
  TraitInfo,
} from "./types.js";

export interface RefineOutcome {
  ok: boolean;
  error?: string; // locale key for a client-side block, server message otherwise
}

export class ReviewScreen {
  essays: EssayWire[] = [];
  runs: RunSnapshot[] = [];
  /** runs selected for side-by-side comparison columns */
  comparedRunIds: string[] = [];
  finalized: FinalizedMap | null = null;

  constructor(
    private api: ApiClient,
    readonly config: ServiceConfig,
    readonly assignmentId: string,
  ) {}

  trait(name: string): TraitInfo | undefined {
    return this.config.traits.find((t) => t.name === name);
  }

  async load(): Promise<void> {
    const [essays, runs, finalized] = await Promise.all([
      this.api.listEssays(this.assignmentId),
      this.api.listRuns(this.assignmentId),
      this.api.getFinalized(this.assignmentId),
    ]);
    this.essays = essays.essays;
    this.runs = runs.runs;
    this.finalized = finalized;
    if (this.comparedRunIds.length === 0 && this.runs.length > 0) {
      this.comparedRunIds = [this.runs[this.runs.length - 1].run_id];
    }
  }

  compare(runIds: string[]): void {
    const known = new Set(this.runs.map((r) => r.run_id));
    this.comparedRunIds = runIds.filter((id) => known.has(id));
  }

  /** score columns per essay: one per compared run plus the finalized view */
  scoreColumns(essayId: string, trait: string): { column: string; value: number | null; source?: string }[] {
    const columns: { column: string; value: number | null; source?: string }[] = [];
    for (const runId of this.comparedRunIds) {
      const run = this.runs.find((r) => r.run_id === runId);
      const hit = run?.results.find((s) => s.essay_id === essayId && s.trait === trait);
      columns.push({ column: runId, value: hit ? hit.value : null });
    }
    const cell = this.finalized?.essays[essayId]?.[trait];
    columns.push({ column: "finalized", value: cell ? cell.value : null, source: cell?.source });
    return columns;
  }

  /** Client-side range gate, then the API call; finalized view refreshes. */
  async refine(essayId: string, trait: string, value: number, note = ""): Promise<RefineOutcome> {
    const spec = this.trait(trait);
    if (!spec) return { ok: false, error: "error_required" };
    if (!Number.isInteger(value) || value < spec.min || value > spec.max) {
      return { ok: false, error: "error_out_of_range" };
    }
    try {
      await this.api.refineScore(this.assignmentId, { essay_id: essayId, trait, value, note });
    } catch (err) {
      return { ok: false, error: err instanceof Error ? err.message : String(err) };
    }
    this.finalized = await this.api.getFinalized(this.assignmentId);
    return { ok: true };
  }

  /** Clamp helper for the editor input (REL stays within 0-2, etc.). */
  clampInput(trait: string, value: number): number {
    const spec = this.trait(trait);
    if (!spec) return value;
    return Math.max(spec.min, Math.min(spec.max, Math.round(value)));
  }

  async deleteRun(runId: string): Promise<void> {
    await this.api.deleteRun(runId);
    this.runs = this.runs.filter((r) => r.run_id !== runId);
    this.comparedRunIds = this.comparedRunIds.filter((id) => id !== runId);
    this.finalized = await this.api.getFinalized(this.assignmentId);
  }

  downloadReport(): Promise<ReportDocument> {
    return this.api.getReport(this.assignmentId);
  }
}
