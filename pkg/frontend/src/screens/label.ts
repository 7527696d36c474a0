/** The labeling queue: one card per sampled record, grouped by the class the
 * model predicted. The model's label is pre-highlighted but every card needs
 * an explicit choice; submit stays disabled until all cards are labeled.
 * Number keys label the focused card.
 */

import { el, fmtPercent } from '../dom.js';
import type { AppState } from '../store.js';
import { allLabeled, batchRecordIds, unlabeledRecordIds } from '../store.js';
import { renderBanner } from './create.js';

export interface LabelActions {
  onPick: (recordId: string, label: string) => void;
  onFocus: (recordId: string) => void;
  onSubmit: () => void;
  onToggleConfidence: () => void;
  onDiscardDrafts: () => void;
}

export function renderLabelScreen(state: AppState, actions: LabelActions): HTMLElement {
  const view = state.view;
  const batch = view?.pending_batch;
  if (!view || !batch) {
    return el('section', { class: 'screen' }, el('p', {}, 'No batch is awaiting labels.'));
  }
  const classes = view.classes;
  const quotaBound = view.sampling_params.per_class_quota * classes.length;
  const ids = batchRecordIds(view);
  const missing = unlabeledRecordIds(state);
  const focused = state.focusedRecordId ?? missing[0] ?? ids[0] ?? null;

  const header = el(
    'header',
    { class: 'label-header' },
    el('h1', {}, `Label batch — iteration ${batch.iteration + 1}`),
    el(
      'p',
      { 'data-testid': 'batch-progress' },
      `${ids.length - missing.length}/${ids.length} labeled`,
    ),
    el(
      'label',
      { class: 'confidence-toggle' },
      el('input', {
        type: 'checkbox',
        'data-testid': 'confidence-toggle',
        ...(state.showConfidence ? { checked: true } : {}),
        onchange: () => actions.onToggleConfidence(),
      }),
      ' show model confidence',
    ),
    el(
      'p',
      { class: 'hint' },
      `Keys 1–${Math.min(classes.length, 9)} label the focused card.`,
    ),
  );

  const groups = batch.groups.map((group) =>
    el(
      'div',
      { class: 'bucket', 'data-bucket': group.class_bucket },
      el('h2', {}, `Model bucket: ${group.class_bucket} (${group.items.length})`),
      ...group.items.map((item) => {
        const chosen = state.drafts[item.record_id];
        const card = el(
          'article',
          {
            class: `card${item.record_id === focused ? ' focused' : ''}${chosen ? ' labeled' : ''}`,
            'data-testid': `card-${item.record_id}`,
            tabindex: '0',
            onfocus: () => actions.onFocus(item.record_id),
            onclick: () => actions.onFocus(item.record_id),
          },
          el('p', { class: 'narrative' }, item.text),
          el(
            'p',
            { class: 'model-label' },
            `model: ${item.model_label}`,
            state.showConfidence
              ? el(
                  'span',
                  { class: 'confidence', 'data-testid': `confidence-${item.record_id}` },
                  ` (confidence ${fmtPercent(item.confidence)})`,
                )
              : null,
          ),
          el(
            'div',
            { class: 'choices' },
            ...classes.map((cls, index) =>
              el(
                'button',
                {
                  class: [
                    'choice',
                    cls === item.model_label ? 'model-suggested' : '',
                    chosen === cls ? 'chosen' : '',
                  ]
                    .filter(Boolean)
                    .join(' '),
                  'data-testid': `choose-${item.record_id}-${index}`,
                  onclick: (event) => {
                    event.stopPropagation();
                    actions.onPick(item.record_id, cls);
                  },
                },
                `${index + 1}. ${cls}`,
              ),
            ),
          ),
        );
        return card;
      }),
    ),
  );

  const submit = el(
    'button',
    {
      class: 'submit',
      'data-testid': 'submit-labels',
      disabled: !allLabeled(state),
      onclick: () => actions.onSubmit(),
    },
    allLabeled(state) ? 'Submit labels' : `Label ${missing.length} more`,
  );

  return el(
    'section',
    { class: 'screen screen-label', 'data-batch-size': String(batch.size) },
    state.banner ? renderBanner(state.banner) : null,
    batch.size > quotaBound
      ? el('div', { class: 'banner banner-error' }, 'Batch exceeds the quota bound!')
      : null,
    header,
    ...groups,
    submit,
    el(
      'button',
      { class: 'discard', 'data-testid': 'discard-drafts', onclick: () => actions.onDiscardDrafts() },
      'Discard entered labels',
    ),
  );
}

/** Map a keypress to a class choice for the focused card. */
export function classForKey(key: string, classes: string[]): string | null {
  if (!/^[1-9]$/.test(key)) return null;
  const index = Number(key) - 1;
  return index < classes.length ? classes[index] : null;
}
