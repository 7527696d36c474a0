/** Session dashboard: progress, prompt lineage, actions (build batch,
 * finalize), the post-submit mismatch summary, results download, and the
 * evaluation report with per-class metrics and bias slices.
 */

import { el, fmtMetric, fmtPercent } from '../dom.js';
import type { AppState } from '../store.js';
import type { GroupReport, MetricsBlock } from '../types.js';
import { renderBanner } from './create.js';

export interface SessionActions {
  onBuildBatch: () => void;
  onFinalize: () => void;
  onDownloadResults: () => void;
  onUploadTruth: (file: File, sliceColumn: string) => void;
  onRefresh: () => void;
}

export function renderSessionScreen(state: AppState, actions: SessionActions): HTMLElement {
  const view = state.view;
  if (!view) {
    return el('section', { class: 'screen' }, el('p', {}, 'Loading session…'));
  }
  const busyText =
    view.busy === 'building_batch'
      ? 'Classifying a fresh subsample…'
      : view.busy === 'finalizing'
        ? 'Classifying the full corpus…'
        : null;

  const actionsRow: HTMLElement[] = [];
  if (view.status === 'ReadyToSample' && !view.busy) {
    actionsRow.push(
      el(
        'button',
        { 'data-testid': 'build-batch', onclick: () => actions.onBuildBatch() },
        view.iteration === 0 ? 'Build first batch' : 'Build next batch',
      ),
      el(
        'button',
        { 'data-testid': 'finalize', onclick: () => actions.onFinalize() },
        'Finalize: classify everything',
      ),
    );
  }
  if (view.status === 'Finalized') {
    actionsRow.push(
      el(
        'button',
        { 'data-testid': 'download-results', onclick: () => actions.onDownloadResults() },
        'Download results CSV',
      ),
    );
  }

  const lineage = el(
    'ol',
    { class: 'lineage', 'data-testid': 'prompt-lineage' },
    ...view.prompts.map((p) =>
      el(
        'li',
        { class: p.changed ? 'changed' : 'unchanged' },
        `v${p.version_index} — ${p.n_fewshots} corrections folded in` +
          (p.changed ? '' : ' (no change)'),
      ),
    ),
  );

  const submitSummary = state.lastSubmit
    ? el(
        'div',
        { class: 'submit-summary', 'data-testid': 'submit-summary' },
        el(
          'p',
          {},
          `${state.lastSubmit.n_mismatches} of your labels disagreed with the model. ` +
            (state.lastSubmit.prompt_text_changed
              ? `Prompt refined to v${state.lastSubmit.new_prompt_version}.`
              : `No corrections to fold in; prompt v${state.lastSubmit.new_prompt_version} keeps the same text.`),
        ),
        state.lastSubmit.diff
          ? el('details', {}, el('summary', {}, 'Prompt diff'), el('pre', {}, state.lastSubmit.diff))
          : null,
      )
    : null;

  const truthInput = el('input', {
    type: 'file',
    accept: '.json,application/json',
    'data-testid': 'truth-file',
  }) as HTMLInputElement;
  const sliceInput = el('input', {
    type: 'text',
    placeholder: 'slice column (optional)',
    'data-testid': 'slice-column',
  }) as HTMLInputElement;

  const evaluation = view.status === 'Finalized'
    ? el(
        'div',
        { class: 'evaluate' },
        el('h2', {}, 'Evaluate against ground truth'),
        el('p', { class: 'hint' }, 'Upload a JSON object of record_id to true class.'),
        truthInput,
        sliceInput,
        el(
          'button',
          {
            'data-testid': 'evaluate',
            onclick: () => {
              const file = truthInput.files?.[0];
              if (file) actions.onUploadTruth(file, sliceInput.value.trim());
            },
          },
          'Compute metrics',
        ),
        state.evaluation ? renderEvaluation(state.evaluation) : null,
      )
    : null;

  return el(
    'section',
    { class: 'screen screen-session' },
    state.banner ? renderBanner(state.banner) : null,
    el('h1', {}, `Session ${view.session_id}`),
    el(
      'p',
      { 'data-testid': 'session-status' },
      `Status: ${view.status}${busyText ? ` — ${busyText}` : ''}`,
    ),
    el(
      'p',
      { 'data-testid': 'session-progress' },
      `Iteration ${view.iteration} · ${view.labeled_count} records labeled of ${view.corpus_size}`,
    ),
    state.pollingPaused
      ? el(
          'div',
          { class: 'banner banner-error', 'data-testid': 'poll-paused' },
          'Live updates unavailable. ',
          el('button', { 'data-testid': 'manual-refresh', onclick: () => actions.onRefresh() }, 'Refresh'),
        )
      : null,
    el('div', { class: 'actions' }, ...actionsRow),
    submitSummary,
    el('h2', {}, 'Prompt lineage'),
    state.prompt0Text && view.prompts.length === 1
      ? el('details', { open: true }, el('summary', {}, 'Initial prompt'), el('pre', { 'data-testid': 'prompt0' }, state.prompt0Text))
      : null,
    lineage,
    evaluation,
  );
}

function metricsTable(block: MetricsBlock): HTMLElement {
  const header = el(
    'tr',
    {},
    ...['class', 'precision', 'recall', 'F1', 'support'].map((h) => el('th', {}, h)),
  );
  const rows = Object.entries(block.per_class).map(([cls, m]) =>
    el(
      'tr',
      { 'data-testid': `metrics-row-${cls}` },
      el('td', {}, cls),
      el('td', {}, fmtMetric(m.precision)),
      el('td', {}, fmtMetric(m.recall)),
      el('td', {}, fmtMetric(m.f1)),
      el('td', {}, String(m.support)),
    ),
  );
  return el('table', { class: 'metrics' }, header, ...rows);
}

function renderEvaluation(evaluation: {
  n_evaluated: number;
  n_excluded_labeled: number;
  metrics: MetricsBlock;
  slices?: Record<string, GroupReport>;
}): HTMLElement {
  const macro = evaluation.metrics.macro;
  const slices = evaluation.slices
    ? el(
        'div',
        { class: 'slices' },
        el('h3', {}, 'Bias slices'),
        ...Object.values(evaluation.slices).map((group) =>
          el(
            'div',
            { class: 'slice', 'data-testid': `slice-${group.group}` },
            el(
              'h4',
              {},
              `${group.group} (n=${group.n})`,
              group.low_n
                ? el('span', { class: 'low-n-badge', 'data-testid': `low-n-${group.group}` }, ' low n')
                : null,
            ),
            metricsTable(group),
          ),
        ),
      )
    : null;
  return el(
    'div',
    { class: 'evaluation-report', 'data-testid': 'evaluation-report' },
    el(
      'p',
      { 'data-testid': 'macro-summary' },
      `Macro F1 ${fmtMetric(macro.f1)} · precision ${fmtMetric(macro.precision)} · ` +
        `recall ${fmtMetric(macro.recall)} · accuracy ${fmtPercent(evaluation.metrics.accuracy)} ` +
        `(over ${evaluation.n_evaluated} records, ${evaluation.n_excluded_labeled} expert-labeled excluded)`,
    ),
    metricsTable(evaluation.metrics),
    slices,
  );
}
