// Typed client over the dialog-service JSON API. The UI consumes these
// endpoints exactly; no metric or reward is ever computed client-side.

export interface SessionInfo {
  session_id: string;
  created_at: number;
  mode: "live" | "replay";
}

export interface ImageInfo {
  id: string;
  predicted_class: string;
}

export interface AltsResponse {
  image_id: string;
  c_pred: string;
  alternates: string[];
}

export interface FaultLineBundle {
  query: { image_id: string; c_pred: string; c_alt: string };
  pft: string[];
  nft: string[];
  margin: number;
  objective: number;
  iterations: number;
  flipped: boolean;
  concept_examples: Record<string, string[]>;
}

export interface QuizOption {
  add: string[];
  remove: string[];
}

export interface Quiz {
  quiz_id: string;
  prompt: string;
  options: QuizOption[];
}

export interface FaultLineResponse {
  bundle: FaultLineBundle;
  quiz: Quiz | null;
}

export interface QuizResult {
  correct: boolean;
  reward: number;
  next_prompt: string;
  policy_updated: boolean;
}

export interface TrustReport {
  jpt: number;
  jnt: number;
  reliance: number;
  jt_classification: number;
  per_game: Array<Record<string, unknown>>;
}

export interface ApiError {
  code: string;
  message: string;
}

export class ApiRequestError extends Error {
  constructor(
    public status: number,
    public body: ApiError,
  ) {
    super(`${body.code}: ${body.message}`);
  }
}

export type FetchLike = (
  input: string,
  init?: RequestInit,
) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl = "",
    private fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    const body = await response.json();
    if (!response.ok) {
      throw new ApiRequestError(response.status, body as ApiError);
    }
    return body as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  createSession(): Promise<SessionInfo> {
    return this.post<SessionInfo>("/sessions", {});
  }

  listImages(): Promise<{ images: ImageInfo[] }> {
    return this.request<{ images: ImageInfo[] }>("/images");
  }

  listAlts(sessionId: string, imageId: string): Promise<AltsResponse> {
    return this.request<AltsResponse>(
      `/sessions/${sessionId}/images/${imageId}/alts`,
    );
  }

  getFaultline(
    sessionId: string,
    imageId: string,
    cAlt: string,
  ): Promise<FaultLineResponse> {
    return this.post<FaultLineResponse>(`/sessions/${sessionId}/faultline`, {
      image_id: imageId,
      c_alt: cAlt,
    });
  }

  submitQuiz(
    sessionId: string,
    quizId: string,
    answer: number,
  ): Promise<QuizResult> {
    return this.post<QuizResult>(`/sessions/${sessionId}/quiz/${quizId}`, {
      answer,
    });
  }

  trustReport(sessionId: string): Promise<TrustReport> {
    return this.request<TrustReport>(`/sessions/${sessionId}/trust`);
  }
}
