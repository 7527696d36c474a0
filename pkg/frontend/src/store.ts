/** App state: a single source of truth re-rendered on every change.
 *
 * Displayed status always derives from the last fetched SessionView; the
 * store never invents one. Draft labels persist per session until submitted
 * or explicitly discarded, surviving navigation and reloads.
 */

import type { EvaluateResponse, LabelsResponse, SessionView } from './types.js';

export type Screen = 'create' | 'session';

export interface Banner {
  kind: 'error' | 'info' | 'conflict';
  text: string;
  retryable: boolean;
}

export interface AppState {
  screen: Screen;
  sessionId: string | null;
  view: SessionView | null;
  prompt0Text: string | null;
  drafts: Record<string, string>;
  focusedRecordId: string | null;
  showConfidence: boolean;
  banner: Banner | null;
  lastSubmit: LabelsResponse | null;
  evaluation: EvaluateResponse | null;
  lastDownload: { name: string; content: string } | null;
  pollingPaused: boolean;
}

export function initialState(): AppState {
  return {
    screen: 'create',
    sessionId: null,
    view: null,
    prompt0Text: null,
    drafts: {},
    focusedRecordId: null,
    showConfidence: true,
    banner: null,
    lastSubmit: null,
    evaluation: null,
    lastDownload: null,
    pollingPaused: false,
  };
}

type Listener = (state: AppState) => void;

export class Store {
  private state: AppState = initialState();
  private listeners: Listener[] = [];

  constructor(private storage: Pick<Storage, 'getItem' | 'setItem' | 'removeItem'> | null = null) {}

  get(): AppState {
    return this.state;
  }

  subscribe(listener: Listener): void {
    this.listeners.push(listener);
  }

  update(patch: Partial<AppState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) listener(this.state);
  }

  private draftsKey(): string {
    return `annoteer-drafts-${this.state.sessionId ?? ''}`;
  }

  setDraft(recordId: string, label: string): void {
    const drafts = { ...this.state.drafts, [recordId]: label };
    this.update({ drafts });
    this.storage?.setItem(this.draftsKey(), JSON.stringify(drafts));
  }

  loadDrafts(): void {
    if (!this.storage) return;
    const raw = this.storage.getItem(this.draftsKey());
    if (raw) {
      try {
        this.update({ drafts: JSON.parse(raw) as Record<string, string> });
      } catch {
        this.storage.removeItem(this.draftsKey());
      }
    }
  }

  clearDrafts(): void {
    this.update({ drafts: {}, focusedRecordId: null });
    this.storage?.removeItem(this.draftsKey());
  }
}

export function batchRecordIds(view: SessionView | null): string[] {
  if (!view?.pending_batch) return [];
  return view.pending_batch.groups.flatMap((group) => group.items.map((item) => item.record_id));
}

export function unlabeledRecordIds(state: AppState): string[] {
  return batchRecordIds(state.view).filter((id) => !(id in state.drafts));
}

export function allLabeled(state: AppState): boolean {
  const ids = batchRecordIds(state.view);
  return ids.length > 0 && ids.every((id) => id in state.drafts);
}
