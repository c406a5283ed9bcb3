/** Typed client for the session service. The UI performs no domain math:
 * every number it renders arrives through these payloads. */

export interface MasteryEntry {
  skill_id: string;
  name: string;
  value: number;
}

export interface SessionSummary {
  session_id: string;
  student_id: string;
  status: "active" | "finished";
  budget: number;
  step: number;
  steps_remaining: number;
  pending_item: string | null;
}

export interface CreatedSession extends SessionSummary {
  mastery: MasteryEntry[];
}

export interface ItemPayload {
  item_id: string;
  text: string;
  knowledge: string[];
  step: number;
  steps_remaining: number;
}

export interface MasteryDelta {
  skill_id: string;
  name: string;
  before: number;
  after: number;
}

export interface SubmitResult {
  mastery_deltas: MasteryDelta[];
  steps_remaining: number;
  status: "active" | "finished";
}

export interface FeedbackSections {
  mastery_analysis: string;
  recommendation_evaluation: string;
  learning_suggestions: string[];
}

export interface FeedbackDocument {
  student_id: string;
  provider: "llm" | "fallback";
  sections: FeedbackSections;
  recommended_items: string[];
  created_at: string;
  session_id?: string;
}

export interface CreateSessionRequest {
  student_id?: string;
  budget?: number;
  seed?: number;
}

/** Error body shape the service guarantees: {code, message}. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class QuizApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(
    method: "GET" | "POST",
    path: string,
    body?: unknown,
  ): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchFn(`${this.baseUrl}${path}`, {
        method,
        headers: body !== undefined ? { "Content-Type": "application/json" } : {},
        body: body !== undefined ? JSON.stringify(body) : undefined,
      });
    } catch (cause) {
      throw new ApiError(0, "network", `service unreachable: ${String(cause)}`);
    }
    if (!response.ok) {
      let code = "error";
      let message = `request failed with status ${response.status}`;
      try {
        const parsed = (await response.json()) as { code?: string; message?: string };
        code = parsed.code ?? code;
        message = parsed.message ?? message;
      } catch {
        // non-JSON error body: keep the status-based message
      }
      throw new ApiError(response.status, code, message);
    }
    return (await response.json()) as T;
  }

  health(): Promise<{ status: string; model_loaded: boolean }> {
    return this.request("GET", "/api/health");
  }

  createSession(req: CreateSessionRequest): Promise<CreatedSession> {
    return this.request("POST", "/api/sessions", req);
  }

  getSession(sessionId: string): Promise<SessionSummary> {
    return this.request("GET", `/api/sessions/${sessionId}`);
  }

  nextItem(sessionId: string): Promise<ItemPayload> {
    return this.request("POST", `/api/sessions/${sessionId}/next`);
  }

  submitResponse(
    sessionId: string,
    itemId: string,
    correct: 0 | 1,
  ): Promise<SubmitResult> {
    return this.request("POST", `/api/sessions/${sessionId}/responses`, {
      item_id: itemId,
      correct,
    });
  }

  getMastery(sessionId: string): Promise<{ mastery: MasteryEntry[] }> {
    return this.request("GET", `/api/sessions/${sessionId}/mastery`);
  }

  getFeedback(sessionId: string): Promise<FeedbackDocument> {
    return this.request("POST", `/api/sessions/${sessionId}/feedback`);
  }
}
