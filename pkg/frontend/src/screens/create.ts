/** Session creation: corpus upload, task definition, sampling parameters. */

import { el } from '../dom.js';
import type { Banner } from '../store.js';

export interface CreateForm {
  file: File | null;
  classesText: string;
  request: string;
  textColumn: string;
  idColumn: string;
  metadataColumns: string;
  sampleFraction: number;
  perClassQuota: number;
  rngSeed: number;
}

export function emptyForm(): CreateForm {
  return {
    file: null,
    classesText: '',
    request: '',
    textColumn: '',
    idColumn: '',
    metadataColumns: '',
    sampleFraction: 0.1,
    perClassQuota: 10,
    rngSeed: 0,
  };
}

/** Client-side validation; blocking problems are reported before any network call. */
export function validateForm(form: CreateForm): string[] {
  const problems: string[] = [];
  if (!form.file) problems.push('Choose a corpus CSV file.');
  if (!form.textColumn.trim()) problems.push('Name the column holding the record text.');
  const classes = splitClasses(form.classesText);
  if (classes.length < 2) problems.push('Give at least two class names.');
  if (!form.request.trim()) problems.push('Describe the classification request.');
  return problems;
}

export function splitClasses(text: string): string[] {
  return text
    .split(',')
    .map((part) => part.trim())
    .filter(Boolean);
}

interface CreateScreenProps {
  form: CreateForm;
  banner: Banner | null;
  creating: boolean;
  onChange: (patch: Partial<CreateForm>) => void;
  onSubmit: () => void;
}

export function renderCreateScreen(props: CreateScreenProps): HTMLElement {
  const { form, banner, creating } = props;
  const problems = validateForm(form);

  const field = (
    label: string,
    input: HTMLElement,
    hint?: string,
  ): HTMLElement =>
    el(
      'label',
      { class: 'field' },
      el('span', { class: 'field-label' }, label),
      input,
      hint ? el('span', { class: 'field-hint' }, hint) : null,
    );

  const fileInput = el('input', {
    type: 'file',
    accept: '.csv,text/csv',
    'data-testid': 'corpus-file',
    onchange: (event) => {
      const target = event.target as HTMLInputElement;
      props.onChange({ file: target.files?.[0] ?? null });
    },
  });

  const text = (
    testid: string,
    value: string,
    patch: (value: string) => Partial<CreateForm>,
  ): HTMLInputElement =>
    el('input', {
      type: 'text',
      value,
      'data-testid': testid,
      oninput: (event) => props.onChange(patch((event.target as HTMLInputElement).value)),
    });

  const submit = el(
    'button',
    {
      'data-testid': 'create-session',
      disabled: problems.length > 0 || creating,
      onclick: () => props.onSubmit(),
    },
    creating ? 'Creating…' : 'Create session',
  );

  return el(
    'section',
    { class: 'screen screen-create' },
    el('h1', {}, 'New labeling session'),
    banner ? renderBanner(banner) : null,
    field('Corpus CSV', fileInput),
    field(
      'Text column',
      text('text-column', form.textColumn, (value) => ({ textColumn: value })),
    ),
    field(
      'Id column (optional)',
      text('id-column', form.idColumn, (value) => ({ idColumn: value })),
    ),
    field(
      'Metadata columns (optional, comma-separated)',
      text('metadata-columns', form.metadataColumns, (value) => ({ metadataColumns: value })),
    ),
    field(
      'Classes (comma-separated)',
      text('classes', form.classesText, (value) => ({ classesText: value })),
    ),
    field(
      'Classification request',
      el('textarea', {
        'data-testid': 'request',
        oninput: (event) => props.onChange({ request: (event.target as HTMLTextAreaElement).value }),
      }),
      'What should be extracted from each record?',
    ),
    problems.length
      ? el(
          'ul',
          { class: 'problems', 'data-testid': 'client-problems' },
          ...problems.map((p) => el('li', {}, p)),
        )
      : null,
    submit,
  );
}

export function renderBanner(banner: Banner): HTMLElement {
  return el(
    'div',
    { class: `banner banner-${banner.kind}`, 'data-testid': 'banner' },
    banner.text,
    banner.retryable ? el('span', { class: 'banner-retry' }, ' You can retry.') : null,
  );
}
