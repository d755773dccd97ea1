// Run event subscription with a reconnect cursor. The transport is
// injectable: the browser adapter wraps EventSource, tests wrap the
// recorded server. Reconnects always resume from the last seq actually
// seen, so a drop can never duplicate or lose a cell.

import type { RunEventMsg } from "./types.js";

export interface StreamHandle {
  close(): void;
}

export type StreamConnector = (
  runId: string,
  fromSeq: number,
  onEvent: (ev: RunEventMsg) => void,
  onError: () => void,
) => StreamHandle;

export interface RunSubscriptionOptions {
  /** delay before reconnecting after a drop, ms */
  retryDelayMs?: number;
  /** invoked after the terminal event */
  onTerminal?: (ev: RunEventMsg) => void;
  /** invoked on every accepted event, in seq order */
  onEvent: (ev: RunEventMsg) => void;
  /** scheduling hook, injectable for tests */
  schedule?: (fn: () => void, ms: number) => void;
}

const TERMINAL_KINDS = new Set(["run_completed", "run_failed"]);

export class RunSubscription {
  lastSeenSeq = 0;
  reconnects = 0;
  closed = false;
  private handle: StreamHandle | null = null;

  constructor(
    private connect: StreamConnector,
    private runId: string,
    private opts: RunSubscriptionOptions,
  ) {}

  start(fromSeq = 0): void {
    this.lastSeenSeq = fromSeq;
    this.open();
  }

  private open(): void {
    if (this.closed) return;
    this.handle = this.connect(
      this.runId,
      this.lastSeenSeq,
      (ev) => this.accept(ev),
      () => this.dropped(),
    );
  }

  private accept(ev: RunEventMsg): void {
    if (this.closed) return;
    if (ev.seq <= this.lastSeenSeq) return; // duplicate after reconnect race
    this.lastSeenSeq = ev.seq;
    this.opts.onEvent(ev);
    if (TERMINAL_KINDS.has(ev.kind)) {
      this.close();
      this.opts.onTerminal?.(ev);
    }
  }

  private dropped(): void {
    if (this.closed) return;
    this.handle?.close();
    this.handle = null;
    this.reconnects += 1;
    const schedule = this.opts.schedule ?? ((fn, ms) => setTimeout(fn, ms));
    schedule(() => this.open(), this.opts.retryDelayMs ?? 1000);
  }

  close(): void {
    this.closed = true;
    this.handle?.close();
    this.handle = null;
  }
}

/** Browser transport: wraps EventSource against the /v1 stream endpoint. */
export function eventSourceConnector(base = ""): StreamConnector {
  return (runId, fromSeq, onEvent, onError) => {
    const es = new EventSource(`${base}/v1/runs/${runId}/stream?from_seq=${fromSeq}`);
    const kinds = ["run_started", "trait_scored", "essay_completed", "run_completed", "run_failed"];
    for (const kind of kinds) {
      es.addEventListener(kind, (e: MessageEvent) => {
        onEvent({ seq: Number((e as MessageEvent).lastEventId), kind, payload: JSON.parse(e.data) });
      });
    }
    es.onerror = () => onError();
    return { close: () => es.close() };
  };
}
