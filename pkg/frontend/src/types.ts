/** JSON contract of the annoteer HTTP API. */

export type SessionStatus = 'ReadyToSample' | 'AwaitingLabels' | 'Finalized';

export interface BatchItem {
  record_id: string;
  text: string;
  model_label: string;
  confidence: number;
}

export interface BatchGroup {
  class_bucket: string;
  items: BatchItem[];
}

export interface PendingBatch {
  iteration: number;
  created_from_prompt: number;
  strategy: string;
  size: number;
  groups: BatchGroup[];
}

export interface PromptSummary {
  version_index: number;
  created_at: string;
  n_fewshots: number;
  text_chars: number;
  changed: boolean;
}

export interface SessionView {
  session_id: string;
  status: SessionStatus;
  busy: 'building_batch' | 'finalizing' | null;
  last_error: string | null;
  iteration: number;
  labeled_count: number;
  corpus_size: number;
  classes: string[];
  request: string;
  sampling_params: {
    sample_fraction: number;
    per_class_quota: number;
    strategy: string;
  };
  pending_batch: PendingBatch | null;
  prompts: PromptSummary[];
}

export interface CreateSessionResponse {
  session_id: string;
  prompt0_text: string;
  status: SessionStatus;
}

export interface LabelsResponse {
  n_mismatches: number;
  new_prompt_version: number;
  prompt_text_changed: boolean;
  diff: string;
}

export interface ClassMetrics {
  precision: number;
  recall: number;
  f1: number;
  support: number;
}

export interface MetricsBlock {
  per_class: Record<string, ClassMetrics>;
  macro: { precision: number; recall: number; f1: number };
  accuracy: number;
  n_evaluated: number;
  n_parse_failures: number;
  degenerate_classes: string[];
}

export interface GroupReport extends MetricsBlock {
  group: string;
  n: number;
  low_n: boolean;
}

export interface EvaluateResponse {
  n_truth: number;
  n_excluded_labeled: number;
  n_evaluated: number;
  metrics: MetricsBlock;
  macro_ci: Record<string, { point_estimate: number; lower_95: number; upper_95: number }>;
  slices?: Record<string, GroupReport>;
}

export interface ApiError {
  status: number;
  detail: unknown;
}
