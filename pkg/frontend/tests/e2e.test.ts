/** End-to-end flows driven through the real DOM against the fake server:
 * upload, two labeling iterations with submit gating, finalize, download,
 * batch-size bound, draft persistence, and the duplicate-tab conflict.
 */

import { afterEach, beforeEach, describe, expect, it } from 'vitest';

import { ApiClient } from '../src/api.js';
import { App } from '../src/app.js';
import { FakeServer } from './fake_server.js';

const CLASSES = ['Helmet', 'No Helmet', 'Not mentioned'];

function corpusCsv(n: number): string {
  const lines = ['record_id,narrative,Sex'];
  for (let i = 0; i < n; i += 1) {
    lines.push(`n${i},Patient ${i} fell off a scooter near the gate,${i % 2 ? 'Male' : 'Female'}`);
  }
  return lines.join('\n') + '\n';
}

function setInput(testid: string, value: string): void {
  const input = document.querySelector<HTMLInputElement | HTMLTextAreaElement>(
    `[data-testid="${testid}"]`,
  );
  if (!input) throw new Error(`no input ${testid}`);
  input.value = value;
  input.dispatchEvent(new Event('input', { bubbles: true }));
}

function attachFile(testid: string, file: File): void {
  const input = document.querySelector<HTMLInputElement>(`[data-testid="${testid}"]`);
  if (!input) throw new Error(`no file input ${testid}`);
  Object.defineProperty(input, 'files', {
    value: { 0: file, length: 1, item: (i: number) => (i === 0 ? file : null) },
    configurable: true,
  });
  input.dispatchEvent(new Event('change', { bubbles: true }));
}

function click(testid: string): void {
  const node = document.querySelector<HTMLButtonElement>(`[data-testid="${testid}"]`);
  if (!node) throw new Error(`no element ${testid}`);
  node.click();
}

function query(testid: string): HTMLElement | null {
  return document.querySelector(`[data-testid="${testid}"]`);
}

async function waitFor(predicate: () => boolean, timeoutMs = 3000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (predicate()) return;
    await new Promise((resolve) => setTimeout(resolve, 5));
  }
  throw new Error('waitFor timed out');
}

class MemoryStorage {
  private data = new Map<string, string>();
  getItem(key: string): string | null {
    return this.data.get(key) ?? null;
  }
  setItem(key: string, value: string): void {
    this.data.set(key, value);
  }
  removeItem(key: string): void {
    this.data.delete(key);
  }
}

let server: FakeServer;
let root: HTMLElement;
let storage: MemoryStorage;

function mountApp(): App {
  const app = new App(root, new ApiClient('', server.fetch), storage, { pollIntervalMs: 0 });
  return app;
}

async function createSession(app: App, n = 30, quota = 2): Promise<void> {
  attachFile('corpus-file', new File([corpusCsv(n)], 'corpus.csv', { type: 'text/csv' }));
  setInput('text-column', 'narrative');
  setInput('id-column', 'record_id');
  setInput('metadata-columns', 'Sex');
  setInput('classes', CLASSES.join(','));
  setInput('request', 'Extract helmet usage status.');
  app.updateForm({ perClassQuota: quota, sampleFraction: 0.5 });
  await waitFor(() => !(query('create-session') as HTMLButtonElement).disabled);
  click('create-session');
  await waitFor(() => app.store.get().screen === 'session' && app.store.get().view !== null);
}

async function labelWholeBatch(app: App, flip = 0): Promise<void> {
  const view = app.store.get().view;
  if (!view?.pending_batch) throw new Error('no pending batch');
  let flipped = 0;
  for (const group of view.pending_batch.groups) {
    for (const item of group.items) {
      let label = item.model_label;
      if (flipped < flip) {
        label = CLASSES.find((c) => c !== item.model_label) ?? label;
        flipped += 1;
      }
      const index = CLASSES.indexOf(label);
      click(`choose-${item.record_id}-${index}`);
    }
  }
}

beforeEach(() => {
  server = new FakeServer();
  storage = new MemoryStorage();
  document.body.innerHTML = '<div id="app"></div>';
  root = document.getElementById('app') as HTMLElement;
});

afterEach(() => {
  document.body.innerHTML = '';
});

describe('session creation', () => {
  it('blocks client-side before any network call when the request is missing', async () => {
    mountApp();
    attachFile('corpus-file', new File([corpusCsv(5)], 'c.csv', { type: 'text/csv' }));
    setInput('text-column', 'narrative');
    setInput('classes', CLASSES.join(','));
    // request left empty
    await waitFor(() => query('client-problems') !== null);
    expect(query('client-problems')?.textContent).toContain('classification request');
    expect((query('create-session') as HTMLButtonElement).disabled).toBe(true);
    expect(server.sessions.size).toBe(0);
  });

  it('shows the initial prompt after a successful upload', async () => {
    const app = mountApp();
    await createSession(app);
    expect(query('session-status')?.textContent).toContain('ReadyToSample');
    expect(query('prompt0')?.textContent).toContain('ANSWER: <class>');
    expect(query('build-batch')?.textContent).toContain('Build first batch');
  });

  it('renders the 400 validation report without creating a phantom session', async () => {
    const app = mountApp();
    const bad = 'record_id,narrative\nx1,first\nx1,second\n';
    attachFile('corpus-file', new File([bad], 'bad.csv', { type: 'text/csv' }));
    setInput('text-column', 'narrative');
    setInput('id-column', 'record_id');
    setInput('classes', CLASSES.join(','));
    setInput('request', 'Extract helmet usage status.');
    click('create-session');
    await waitFor(() => query('banner') !== null);
    expect(query('banner')?.textContent).toContain('appears twice');
    expect(app.store.get().screen).toBe('create');
    expect(server.sessions.size).toBe(0);
  });
});

describe('full labeling flow', () => {
  it('uploads a 30-record CSV, labels two iterations, finalizes, downloads', async () => {
    const app = mountApp();
    await createSession(app, 30, 2);

    // --- iteration 1
    click('build-batch');
    await waitFor(() => app.store.get().view?.pending_batch != null);
    const batch1 = app.store.get().view!.pending_batch!;
    expect(batch1.size).toBeLessThanOrEqual(
      app.store.get().view!.sampling_params.per_class_quota * CLASSES.length,
    );
    expect(document.querySelectorAll('.card').length).toBe(batch1.size);

    // Submit stays blocked until every card is labeled.
    const submit = () => query('submit-labels') as HTMLButtonElement;
    expect(submit().disabled).toBe(true);
    const allIds = batch1.groups.flatMap((g) => g.items.map((i) => i.record_id));
    const [firstId, ...restIds] = allIds;
    for (const rid of restIds) {
      const item = batch1.groups.flatMap((g) => g.items).find((i) => i.record_id === rid)!;
      click(`choose-${rid}-${CLASSES.indexOf(item.model_label)}`);
    }
    expect(submit().disabled).toBe(true);
    expect(query('batch-progress')?.textContent).toContain(`${allIds.length - 1}/${allIds.length}`);

    // The last card gets labeled by keyboard: focus it, then press "2".
    click(`card-${firstId}`);
    document.dispatchEvent(new KeyboardEvent('keydown', { key: '2', bubbles: true }));
    await waitFor(() => !submit().disabled);

    click('submit-labels');
    await waitFor(() => app.store.get().view?.status === 'ReadyToSample');
    await waitFor(() => query('submit-summary') !== null);
    expect(app.store.get().view?.iteration).toBe(1);

    // --- iteration 2
    click('build-batch');
    await waitFor(() => app.store.get().view?.pending_batch != null);
    await labelWholeBatch(app, 2);
    await waitFor(() => !(query('submit-labels') as HTMLButtonElement).disabled);
    click('submit-labels');
    await waitFor(() => app.store.get().view?.iteration === 2);
    expect(query('submit-summary')?.textContent).toContain('2 of your labels disagreed');

    // --- finalize and download
    click('finalize');
    await waitFor(
      () => app.store.get().view?.status === 'Finalized' && !app.store.get().view?.busy,
    );
    click('download-results');
    await waitFor(() => app.store.get().lastDownload !== null);
    const download = app.store.get().lastDownload!;
    expect(download.content).toContain('record_id,predicted_class,confidence,prompt_version');
    expect(download.content.trim().split('\n').length).toBe(31); // header + 30 rows

    // Prompt lineage shows v0..v2.
    expect(query('prompt-lineage')?.textContent).toContain('v2');
  });

  it('never renders more cards than quota x classes across iterations', async () => {
    const app = mountApp();
    await createSession(app, 30, 1);
    for (let i = 0; i < 3; i += 1) {
      click('build-batch');
      await waitFor(() => app.store.get().view?.pending_batch != null);
      const bound =
        app.store.get().view!.sampling_params.per_class_quota * CLASSES.length;
      expect(document.querySelectorAll('.card').length).toBeLessThanOrEqual(bound);
      await labelWholeBatch(app);
      await waitFor(() => !(query('submit-labels') as HTMLButtonElement).disabled);
      click('submit-labels');
      await waitFor(() => app.store.get().view?.iteration === i + 1);
    }
  });

  it('confidence is visible by default and hidden by the toggle', async () => {
    const app = mountApp();
    await createSession(app, 20, 2);
    click('build-batch');
    await waitFor(() => app.store.get().view?.pending_batch != null);
    const batch = app.store.get().view!.pending_batch!;
    const firstId = batch.groups[0].items[0].record_id;
    expect(query(`confidence-${firstId}`)).not.toBeNull();
    expect(query(`confidence-${firstId}`)?.textContent).toMatch(/confidence \d/);
    click('confidence-toggle');
    await waitFor(() => query(`confidence-${firstId}`) === null);
    click('confidence-toggle');
    await waitFor(() => query(`confidence-${firstId}`) !== null);
  });

  it('keeps entered labels when the server rejects the submission', async () => {
    const app = mountApp();
    await createSession(app, 20, 2);
    click('build-batch');
    await waitFor(() => app.store.get().view?.pending_batch != null);
    await labelWholeBatch(app);
    // Corrupt one draft to a non-class to force a 400.
    const anyId = Object.keys(app.store.get().drafts)[0];
    app.store.setDraft(anyId, 'bicycle');
    await waitFor(() => !(query('submit-labels') as HTMLButtonElement).disabled);
    click('submit-labels');
    await waitFor(() => query('banner') !== null);
    expect(query('banner')?.textContent).toContain('not a class');
    // Entered labels survive the failure.
    expect(Object.keys(app.store.get().drafts).length).toBeGreaterThan(0);
    expect(app.store.get().view?.status).toBe('AwaitingLabels');
  });
});

describe('draft persistence', () => {
  it('labels survive navigation within a session until submitted', async () => {
    const app = mountApp();
    await createSession(app, 20, 2);
    click('build-batch');
    await waitFor(() => app.store.get().view?.pending_batch != null);
    const batch = app.store.get().view!.pending_batch!;
    const firstItem = batch.groups[0].items[0];
    click(`choose-${firstItem.record_id}-0`);
    expect(app.store.get().drafts[firstItem.record_id]).toBe(CLASSES[0]);

    // A fresh "tab" over the same storage restores the draft.
    const sessionId = app.store.get().sessionId!;
    document.body.innerHTML = '<div id="app"></div>';
    root = document.getElementById('app') as HTMLElement;
    const second = mountApp();
    second.store.update({ screen: 'session', sessionId });
    second.store.loadDrafts();
    await second.pollOnce();
    expect(second.store.get().drafts[firstItem.record_id]).toBe(CLASSES[0]);

    // Explicit discard clears them.
    second.discardDrafts();
    expect(Object.keys(second.store.get().drafts)).toHaveLength(0);
  });
});

describe('duplicate tab', () => {
  it('second submit gets a surfaced conflict and re-syncs cleanly', async () => {
    const appA = mountApp();
    await createSession(appA, 30, 2);
    const sessionId = appA.store.get().sessionId!;
    click('build-batch');
    await waitFor(() => appA.store.get().view?.pending_batch != null);

    // Tab B joins the same session in its own DOM.
    const rootB = document.createElement('div');
    document.body.append(rootB);
    const appB = new App(rootB, new ApiClient('', server.fetch), new MemoryStorage(), {
      pollIntervalMs: 0,
    });
    appB.store.update({ screen: 'session', sessionId });
    await appB.pollOnce();
    expect(appB.store.get().view?.pending_batch).not.toBeNull();

    // Both tabs fill the batch; A submits first.
    const batch = appA.store.get().view!.pending_batch!;
    const labels: Record<string, string> = {};
    for (const group of batch.groups) {
      for (const item of group.items) labels[item.record_id] = item.model_label;
    }
    for (const [rid, label] of Object.entries(labels)) {
      appA.store.setDraft(rid, label);
      appB.store.setDraft(rid, label);
    }
    await appA.submitLabels();
    expect(appA.store.get().view?.iteration).toBe(1);

    // B's submit conflicts, surfaces it, and re-syncs to the fresh state.
    await appB.submitLabels();
    const stateB = appB.store.get();
    expect(stateB.banner?.kind).toBe('conflict');
    expect(stateB.view?.status).toBe('ReadyToSample');
    expect(stateB.view?.iteration).toBe(1);
    expect(rootB.textContent).toContain('already submitted elsewhere');
  });
});

describe('monitoring degradation', () => {
  it('network failure during refresh pauses polling with a manual-refresh banner', async () => {
    const app = mountApp();
    await createSession(app, 10, 2);
    const realFetch = server.fetch;
    // Simulate the network dropping.
    (app as unknown as { api: ApiClient }).api = new ApiClient('', async () => {
      throw new TypeError('network down');
    });
    await app.pollOnce();
    expect(app.store.get().pollingPaused).toBe(true);
    await waitFor(() => query('poll-paused') !== null);

    // Manual refresh recovers once the network is back.
    (app as unknown as { api: ApiClient }).api = new ApiClient('', realFetch);
    click('manual-refresh');
    await waitFor(() => !app.store.get().pollingPaused);
  });
});

describe('evaluation rendering', () => {
  it('renders macro and per-class metrics with bias slices and low-n badges', async () => {
    const app = mountApp();
    await createSession(app, 24, 2);
    click('finalize');
    await waitFor(
      () => app.store.get().view?.status === 'Finalized' && !app.store.get().view?.busy,
    );
    const truth: Record<string, string> = {};
    const session = [...server.sessions.values()][0];
    for (const record of session.records) {
      truth[record.record_id] = server.modelLabel(session, record.record_id);
    }
    const file = new File([JSON.stringify(truth)], 'truth.json', { type: 'application/json' });
    await app.evaluateTruth(file, 'Sex');
    await waitFor(() => query('evaluation-report') !== null);
    expect(query('macro-summary')?.textContent).toContain('Macro F1 1.000');
    for (const cls of CLASSES) {
      expect(query(`metrics-row-${cls}`)).not.toBeNull();
    }
    expect(query('slice-Male')).not.toBeNull();
    expect(query('slice-Female')).not.toBeNull();
    // 12 eligible per sex group > 10, so no low-n badge; shrink to force one.
    expect(query('low-n-Male')).toBeNull();

    const app2 = mountApp();
    await createSession(app2, 8, 2);
    click('finalize');
    await waitFor(
      () => app2.store.get().view?.status === 'Finalized' && !app2.store.get().view?.busy,
    );
    const session2 = [...server.sessions.values()][1];
    const truth2: Record<string, string> = {};
    for (const record of session2.records) {
      truth2[record.record_id] = server.modelLabel(session2, record.record_id);
    }
    await app2.evaluateTruth(
      new File([JSON.stringify(truth2)], 't.json', { type: 'application/json' }),
      'Sex',
    );
    await waitFor(() => query('low-n-Male') !== null);
  });
});
