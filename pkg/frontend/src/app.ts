/** Screen orchestration: wires the API client, the store, polling, and
 * keyboard shortcuts into a single-page app.
 *
 * State shown to the expert always comes from the last GET of the session;
 * after any mutation the app re-fetches rather than trusting its own guess,
 * and a 409 from a duplicate tab resolves by re-syncing to the server.
 */

import { ApiClient, ApiFailure } from './api.js';
import { readFileText } from './files.js';
import { clear, el } from './dom.js';
import { Store, allLabeled, batchRecordIds, unlabeledRecordIds } from './store.js';
import type { CreateForm } from './screens/create.js';
import { emptyForm, renderCreateScreen, splitClasses, validateForm } from './screens/create.js';
import { classForKey, renderLabelScreen } from './screens/label.js';
import { renderSessionScreen } from './screens/session.js';

export interface AppOptions {
  /** Polling cadence for busy sessions; 0 disables automatic polling so
   * tests (or embedders) can pump pollOnce() themselves. */
  pollIntervalMs?: number;
}

export class App {
  readonly store: Store;
  private form: CreateForm = emptyForm();
  private creating = false;
  private pollTimer: ReturnType<typeof setTimeout> | null = null;
  private readonly pollIntervalMs: number;

  constructor(
    private root: HTMLElement,
    private api: ApiClient,
    storage: Pick<Storage, 'getItem' | 'setItem' | 'removeItem'> | null = null,
    options: AppOptions = {},
  ) {
    this.store = new Store(storage);
    this.pollIntervalMs = options.pollIntervalMs ?? 1500;
    this.store.subscribe(() => this.render());
    document.addEventListener('keydown', (event) => this.onKeyDown(event));
    this.render();
  }

  // -- create flow -------------------------------------------------------------

  updateForm(patch: Partial<CreateForm>): void {
    this.form = { ...this.form, ...patch };
    this.store.update({});
  }

  async createSession(): Promise<void> {
    if (validateForm(this.form).length > 0 || !this.form.file) return;
    this.creating = true;
    this.store.update({ banner: null });
    try {
      const response = await this.api.createSession(
        this.form.file,
        { classes: splitClasses(this.form.classesText), request: this.form.request },
        {
          text_column: this.form.textColumn.trim(),
          id_column: this.form.idColumn.trim() || undefined,
          metadata_columns: this.form.metadataColumns
            .split(',')
            .map((c) => c.trim())
            .filter(Boolean),
          sample_fraction: this.form.sampleFraction,
          per_class_quota: this.form.perClassQuota,
          rng_seed: this.form.rngSeed,
        },
      );
      this.store.update({
        screen: 'session',
        sessionId: response.session_id,
        prompt0Text: response.prompt0_text,
        banner: null,
      });
      this.store.loadDrafts();
      await this.refresh();
    } catch (error) {
      // No phantom session: stay on the create screen with the failure.
      this.store.update({ banner: bannerFor(error, 'Session creation failed') });
    } finally {
      this.creating = false;
      this.store.update({});
    }
  }

  // -- session flow -------------------------------------------------------------

  async refresh(): Promise<void> {
    const sessionId = this.store.get().sessionId;
    if (!sessionId) return;
    try {
      const view = await this.api.getSession(sessionId);
      this.store.update({ view, pollingPaused: false });
      this.scheduleNextPoll();
    } catch (error) {
      if (error instanceof ApiFailure) {
        this.store.update({ banner: bannerFor(error, 'Could not load the session') });
      } else {
        // Network trouble: degrade to manual refresh.
        this.store.update({ pollingPaused: true });
      }
    }
  }

  /** One polling step; exposed so tests drive time explicitly. */
  async pollOnce(): Promise<void> {
    await this.refresh();
  }

  private scheduleNextPoll(): void {
    if (this.pollIntervalMs <= 0) return;
    const view = this.store.get().view;
    if (!view?.busy) return;
    if (this.pollTimer) clearTimeout(this.pollTimer);
    this.pollTimer = setTimeout(() => void this.refresh(), this.pollIntervalMs);
  }

  async buildBatch(): Promise<void> {
    const sessionId = this.store.get().sessionId;
    if (!sessionId) return;
    this.store.update({ banner: null, lastSubmit: null });
    try {
      await this.api.startBatch(sessionId);
    } catch (error) {
      this.store.update({ banner: bannerFor(error, 'Could not start the batch') });
      await this.refresh();
      return;
    }
    await this.refresh();
  }

  /** Poll the batch endpoint until the build lands (tests call this directly). */
  async waitForBatch(maxPolls = 1000): Promise<void> {
    const sessionId = this.store.get().sessionId;
    if (!sessionId) return;
    for (let i = 0; i < maxPolls; i += 1) {
      try {
        const batch = await this.api.currentBatch(sessionId);
        if (batch) {
          await this.refresh();
          return;
        }
      } catch (error) {
        this.store.update({ banner: bannerFor(error, 'Batch build failed') });
        await this.refresh();
        return;
      }
      await sleep(this.pollIntervalMs > 0 ? Math.min(this.pollIntervalMs, 50) : 1);
    }
  }

  pickLabel(recordId: string, label: string): void {
    this.store.setDraft(recordId, label);
    const next = unlabeledRecordIds(this.store.get())[0] ?? null;
    this.store.update({ focusedRecordId: next ?? recordId });
  }

  focusCard(recordId: string): void {
    this.store.update({ focusedRecordId: recordId });
  }

  async submitLabels(): Promise<void> {
    const state = this.store.get();
    if (!state.sessionId || !allLabeled(state)) return;
    const ids = batchRecordIds(state.view);
    const labels: Record<string, string> = {};
    for (const id of ids) labels[id] = state.drafts[id];
    try {
      const response = await this.api.submitLabels(state.sessionId, labels);
      this.store.clearDrafts();
      this.store.update({ lastSubmit: response, banner: null });
    } catch (error) {
      if (error instanceof ApiFailure && error.status === 409) {
        // Another tab got there first: surface it and re-sync; entered labels
        // stay in the store until the fresh view says the batch is gone.
        this.store.update({
          banner: {
            kind: 'conflict',
            text: 'This batch was already submitted elsewhere; re-syncing.',
            retryable: false,
          },
        });
      } else {
        this.store.update({ banner: bannerFor(error, 'Label submission failed') });
      }
    }
    await this.refresh();
  }

  discardDrafts(): void {
    this.store.clearDrafts();
  }

  toggleConfidence(): void {
    this.store.update({ showConfidence: !this.store.get().showConfidence });
  }

  async finalize(): Promise<void> {
    const sessionId = this.store.get().sessionId;
    if (!sessionId) return;
    try {
      await this.api.finalize(sessionId);
    } catch (error) {
      this.store.update({ banner: bannerFor(error, 'Finalize failed') });
    }
    await this.refresh();
  }

  /** Poll the session view until it reports Finalized and idle. */
  async waitForFinalized(maxPolls = 1000): Promise<void> {
    for (let i = 0; i < maxPolls; i += 1) {
      await this.refresh();
      const view = this.store.get().view;
      if (view?.status === 'Finalized' && !view.busy) return;
      await sleep(this.pollIntervalMs > 0 ? Math.min(this.pollIntervalMs, 50) : 1);
    }
  }

  async downloadResults(): Promise<void> {
    const sessionId = this.store.get().sessionId;
    if (!sessionId) return;
    try {
      const content = await this.api.resultsCsv(sessionId);
      this.store.update({ lastDownload: { name: `${sessionId}-results.csv`, content } });
      const canNavigate =
        typeof URL !== 'undefined' &&
        typeof URL.createObjectURL === 'function' &&
        !navigator.userAgent.includes('jsdom');
      if (canNavigate) {
        const anchor = el('a', {
          href: URL.createObjectURL(new Blob([content], { type: 'text/csv' })),
          download: `${sessionId}-results.csv`,
        });
        anchor.click();
      }
    } catch (error) {
      this.store.update({ banner: bannerFor(error, 'Download failed') });
    }
  }

  async evaluateTruth(file: File, sliceColumn: string): Promise<void> {
    const sessionId = this.store.get().sessionId;
    if (!sessionId) return;
    try {
      const truth = JSON.parse(await readFileText(file)) as Record<string, string>;
      const evaluation = await this.api.evaluate(sessionId, truth, sliceColumn || undefined);
      this.store.update({ evaluation, banner: null });
    } catch (error) {
      this.store.update({ banner: bannerFor(error, 'Evaluation failed') });
    }
  }

  // -- keyboard ------------------------------------------------------------------

  private onKeyDown(event: KeyboardEvent): void {
    const state = this.store.get();
    if (state.screen !== 'session' || state.view?.status !== 'AwaitingLabels') return;
    const target = event.target as HTMLElement | null;
    if (target && (target.tagName === 'INPUT' || target.tagName === 'TEXTAREA')) return;
    const classes = state.view?.classes ?? [];
    const label = classForKey(event.key, classes);
    if (!label) return;
    const focused = state.focusedRecordId ?? unlabeledRecordIds(state)[0];
    if (!focused) return;
    event.preventDefault();
    this.pickLabel(focused, label);
  }

  // -- rendering ------------------------------------------------------------------

  private render(): void {
    const state = this.store.get();
    clear(this.root);
    if (state.screen === 'create') {
      this.root.append(
        renderCreateScreen({
          form: this.form,
          banner: state.banner,
          creating: this.creating,
          onChange: (patch) => this.updateForm(patch),
          onSubmit: () => void this.createSession(),
        }),
      );
      return;
    }
    if (state.view?.status === 'AwaitingLabels' && state.view.pending_batch) {
      this.root.append(
        renderLabelScreen(state, {
          onPick: (recordId, label) => this.pickLabel(recordId, label),
          onFocus: (recordId) => this.focusCard(recordId),
          onSubmit: () => void this.submitLabels(),
          onToggleConfidence: () => this.toggleConfidence(),
          onDiscardDrafts: () => this.discardDrafts(),
        }),
      );
      return;
    }
    this.root.append(
      renderSessionScreen(state, {
        onBuildBatch: () => void this.buildBatch().then(() => this.waitForBatch()),
        onFinalize: () => void this.finalize().then(() => this.waitForFinalized()),
        onDownloadResults: () => void this.downloadResults(),
        onUploadTruth: (file, sliceColumn) => void this.evaluateTruth(file, sliceColumn),
        onRefresh: () => void this.refresh(),
      }),
    );
  }
}

function bannerFor(error: unknown, prefix: string) {
  if (error instanceof ApiFailure) {
    const retryable = error.status >= 500;
    return {
      kind: 'error' as const,
      text: `${prefix}: ${describeDetail(error.detail)}`,
      retryable,
    };
  }
  return { kind: 'error' as const, text: `${prefix}: ${String(error)}`, retryable: true };
}

function describeDetail(detail: unknown): string {
  if (typeof detail === 'string') return detail;
  if (detail && typeof detail === 'object') {
    const record = detail as Record<string, unknown>;
    if (typeof record.message === 'string' && Array.isArray(record.violations)) {
      const items = record.violations
        .map((v) => (v && typeof v === 'object' ? String((v as { detail?: unknown }).detail ?? '') : ''))
        .filter(Boolean);
      return `${record.message}: ${items.join('; ')}`;
    }
  }
  return JSON.stringify(detail);
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
