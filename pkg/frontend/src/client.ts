// REST client for the what-if service.

import type {
  Capabilities,
  SessionView,
  StepResponse,
  Suggestion,
  WhatIfResponse,
} from "./types";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ServiceError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function requestJSON<T>(
  fetchImpl: FetchLike,
  url: string,
  init?: RequestInit
): Promise<T> {
  const response = await fetchImpl(url, {
    ...init,
    headers: { "Content-Type": "application/json", ...(init?.headers ?? {}) },
  });
  if (!response.ok) {
    const text = await response.text();
    throw new ServiceError(response.status, `${response.status}: ${text}`);
  }
  return response.json() as Promise<T>;
}

export interface WhatIfOptions {
  action?: number;
  horizon?: number;
  n_samples?: number;
}

export class ServiceClient {
  private pendingCommit: { token: number; promise: Promise<StepResponse> } | null = null;
  private commitToken = 0;

  constructor(
    public baseUrl: string,
    private fetchImpl: FetchLike = (url, init) => fetch(url, init)
  ) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
  }

  capabilities(): Promise<Capabilities> {
    return requestJSON(this.fetchImpl, `${this.baseUrl}/capabilities`);
  }

  createSession(body: { seed?: number; state?: number[][]; plevel?: number } = {}): Promise<SessionView> {
    return requestJSON(this.fetchImpl, `${this.baseUrl}/sessions`, {
      method: "POST",
      body: JSON.stringify(body),
    });
  }

  getSession(id: string): Promise<SessionView> {
    return requestJSON(this.fetchImpl, `${this.baseUrl}/sessions/${id}`);
  }

  /**
   * Commit one step.  Guarded against double-submission: while a commit is
   * in flight, repeated calls return the same promise instead of issuing a
   * second request (client-side request token).
   */
  step(id: string, action: number): Promise<StepResponse> {
    if (this.pendingCommit !== null) {
      return this.pendingCommit.promise;
    }
    const token = ++this.commitToken;
    const promise = requestJSON<StepResponse>(
      this.fetchImpl,
      `${this.baseUrl}/sessions/${id}/step`,
      { method: "POST", body: JSON.stringify({ action }) }
    ).finally(() => {
      if (this.pendingCommit?.token === token) {
        this.pendingCommit = null;
      }
    });
    this.pendingCommit = { token, promise };
    return promise;
  }

  whatif(id: string, options: WhatIfOptions): Promise<WhatIfResponse> {
    return requestJSON(this.fetchImpl, `${this.baseUrl}/sessions/${id}/whatif`, {
      method: "POST",
      body: JSON.stringify(options),
    });
  }

  suggest(id: string): Promise<Suggestion> {
    return requestJSON(this.fetchImpl, `${this.baseUrl}/sessions/${id}/suggest`);
  }

  deleteSession(id: string): Promise<{ deleted: string }> {
    return requestJSON(this.fetchImpl, `${this.baseUrl}/sessions/${id}`, { method: "DELETE" });
  }
}
