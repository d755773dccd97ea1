// Live-updating scoring table: one row per essay, one cell per trait,
// filled as trait_scored events arrive. All values come from the event
// stream; the view never computes a score itself.

import { dir, Locale, t } from "./locale.js";
import type { RunEventMsg } from "./types.js";

export interface CellValue {
  value: number;
  modelId: string;
  elapsedMs: number;
  seq: number;
}

export interface FailedCell {
  reason: string;
}

export class ScoringViewState {
  readonly cells = new Map<string, CellValue>();
  readonly failures = new Map<string, FailedCell>();
  /** cell keys in the order their events arrived */
  readonly fillOrder: string[] = [];
  duplicateEvents = 0;
  started = false;
  terminalState: string | null = null;
  essayIds: string[];

  constructor(
    essayIds: string[],
    readonly traits: string[],
  ) {
    this.essayIds = [...essayIds];
  }

  static key(essayId: string, trait: string): string {
    return `${essayId}|${trait}`;
  }

  get expectedCells(): number {
    return this.essayIds.length * this.traits.length;
  }

  get filledCells(): number {
    return this.cells.size;
  }

  get isComplete(): boolean {
    return this.terminalState !== null;
  }

  applyEvent(ev: RunEventMsg): void {
    switch (ev.kind) {
      case "run_started":
        this.started = true;
        break;
      case "trait_scored": {
        const key = ScoringViewState.key(ev.payload.essay_id, ev.payload.trait);
        if (this.cells.has(key)) {
          this.duplicateEvents += 1;
          return;
        }
        this.cells.set(key, {
          value: ev.payload.value,
          modelId: ev.payload.model_id,
          elapsedMs: ev.payload.elapsed_ms,
          seq: ev.seq,
        });
        this.fillOrder.push(key);
        break;
      }
      case "essay_completed":
        for (const failure of ev.payload.failures ?? []) {
          this.failures.set(ScoringViewState.key(ev.payload.essay_id, failure.trait), {
            reason: failure.reason,
          });
        }
        break;
      case "run_completed":
      case "run_failed":
        this.terminalState = ev.payload.state ?? (ev.kind === "run_failed" ? "failed" : "completed");
        break;
    }
  }

  bannerText(locale: Locale): string {
    if (this.terminalState === null) return t(locale, "scoring_live");
    if (this.terminalState === "completed") return t(locale, "run_completed");
    if (this.terminalState === "partially_failed") return t(locale, "run_partially_failed");
    return t(locale, "run_failed");
  }

  renderTable(locale: Locale): string {
    const header = [`<th>${esc(t(locale, "essay"))}</th>`]
      .concat(this.traits.map((trait) => `<th>${esc(trait)}</th>`))
      .join("");
    const rows = this.essayIds
      .map((essayId) => {
        const cells = this.traits
          .map((trait) => {
            const key = ScoringViewState.key(essayId, trait);
            const cell = this.cells.get(key);
            if (cell !== undefined) {
              return `<td class="scored" data-key="${esc(key)}">${cell.value}</td>`;
            }
            const failed = this.failures.get(key);
            if (failed !== undefined) {
              return `<td class="failed" data-key="${esc(key)}" title="${esc(failed.reason)}">${esc(
                t(locale, "failed_cell"),
              )}</td>`;
            }
            return `<td class="pending" data-key="${esc(key)}">${esc(t(locale, "pending_cell"))}</td>`;
          })
          .join("");
        return `<tr><th>${esc(essayId)}</th>${cells}</tr>`;
      })
      .join("");
    const banner = `<p class="banner ${this.terminalState ?? "live"}">${esc(this.bannerText(locale))}</p>`;
    return `<div dir="${dir(locale)}">${banner}<table><thead><tr>${header}</tr></thead><tbody>${rows}</tbody></table></div>`;
  }
}

export function esc(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}
