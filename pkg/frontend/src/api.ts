/** Thin typed client over the HTTP contract; throws ApiFailure on non-2xx. */

import type {
  CreateSessionResponse,
  EvaluateResponse,
  LabelsResponse,
  PendingBatch,
  SessionView,
} from './types.js';

export class ApiFailure extends Error {
  constructor(
    readonly status: number,
    readonly detail: unknown,
  ) {
    super(typeof detail === 'string' ? detail : JSON.stringify(detail));
  }
}

async function parseBody(response: Response): Promise<unknown> {
  const text = await response.text();
  try {
    return text ? JSON.parse(text) : {};
  } catch {
    return text;
  }
}

export class ApiClient {
  constructor(
    readonly baseUrl: string = '',
    readonly fetchImpl: typeof fetch = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    const body = await parseBody(response);
    if (!response.ok) {
      const detail =
        body && typeof body === 'object' && 'detail' in body
          ? (body as { detail: unknown }).detail
          : body;
      throw new ApiFailure(response.status, detail);
    }
    return body as T;
  }

  async createSession(
    file: File,
    task: { classes: string[]; request: string },
    params: Record<string, unknown>,
  ): Promise<CreateSessionResponse> {
    const form = new FormData();
    form.append('corpus_file', file);
    form.append('task', JSON.stringify(task));
    form.append('params', JSON.stringify(params));
    return this.request('/sessions', { method: 'POST', body: form });
  }

  async getSession(sessionId: string): Promise<SessionView> {
    return this.request(`/sessions/${sessionId}`);
  }

  async startBatch(sessionId: string): Promise<{ poll: string }> {
    return this.request(`/sessions/${sessionId}/batches`, { method: 'POST' });
  }

  /** null while the batch is still building (202). */
  async currentBatch(sessionId: string): Promise<PendingBatch | null> {
    const response = await this.fetchImpl(`${this.baseUrl}/sessions/${sessionId}/batches/current`);
    if (response.status === 202) return null;
    const body = await parseBody(response);
    if (!response.ok) {
      const detail =
        body && typeof body === 'object' && 'detail' in body
          ? (body as { detail: unknown }).detail
          : body;
      throw new ApiFailure(response.status, detail);
    }
    return body as PendingBatch;
  }

  async submitLabels(sessionId: string, labels: Record<string, string>): Promise<LabelsResponse> {
    return this.request(`/sessions/${sessionId}/labels`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ labels }),
    });
  }

  async finalize(sessionId: string): Promise<void> {
    await this.request(`/sessions/${sessionId}/finalize`, { method: 'POST' });
  }

  async resultsCsv(sessionId: string): Promise<string> {
    const response = await this.fetchImpl(
      `${this.baseUrl}/sessions/${sessionId}/results?format=csv`,
    );
    if (!response.ok) throw new ApiFailure(response.status, await parseBody(response));
    return response.text();
  }

  async evaluate(
    sessionId: string,
    truth: Record<string, string>,
    sliceColumn?: string,
  ): Promise<EvaluateResponse> {
    return this.request(`/sessions/${sessionId}/evaluate`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(sliceColumn ? { truth, slice_column: sliceColumn } : { truth }),
    });
  }
}
