// Wire types mirroring the /v1 API payloads. The UI never computes scores
// locally: every displayed number originates from one of these shapes.

export interface TraitInfo {
  name: string;
  min: number;
  max: number;
  rubric_required: boolean;
  derived: boolean;
}

export interface ModelInfo {
  id: string;
  display_name: string;
  description: string;
  stars: number;
  kind: string;
  supported_traits: string[];
  language: string;
  load_policy: string;
  enabled: boolean;
  endpoint: string | null;
  default_for: string[];
  hyperparameters: Record<string, unknown>;
}

export interface ServiceConfig {
  languages: string[];
  grade_levels: string[];
  essay_types: string[];
  traits: TraitInfo[];
  models: ModelInfo[];
}

export interface RunEventMsg {
  seq: number;
  kind: string;
  payload: Record<string, any>;
}

export interface TraitScoreWire {
  essay_id: string;
  trait: string;
  raw_value: number;
  value: number;
  model_id: string;
  run_id: string;
  elapsed_ms: number;
}

export interface RunFailureWire {
  essay_id: string;
  trait: string;
  reason: string;
}

export interface RunSnapshot {
  run_id: string;
  assignment_id: string | null;
  requested: { essay_id: string; traits: string[] }[];
  model_binding: Record<string, string>;
  state: string;
  created_by: string;
  created_at: string;
  started_at: string;
  finished_at: string;
  results: TraitScoreWire[];
  failures: RunFailureWire[];
}

export interface FinalizedCell {
  value: number;
  source: string; // "refined" | "derived" | run id
}

export interface FinalizedMap {
  assignment_id: string;
  essays: Record<string, Record<string, FinalizedCell>>;
}

export interface ReportDocument {
  assignment: Record<string, string>;
  trait_order: string[];
  essays: { essay_id: string; word_count: number; scores: Record<string, FinalizedCell> }[];
  stats: Record<string, { count: number; mean: number | null; min: number | null; max: number | null }>;
  unscored: { essay_id: string; trait: string }[];
  generated_at: string;
}

export interface EssayWire {
  id: string;
  text: string;
  upload_batch: string;
  created_at: string;
  word_count: number;
}

export interface IngestResultWire {
  batch_id: string;
  accepted: number;
  rejects: { line: number; reason: string }[];
}

export interface ApiError {
  code: string;
  message: string;
  details: Record<string, unknown>;
}
