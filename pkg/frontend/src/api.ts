/** Typed client for the assistant HTTP API (exactly the documented schema). */

export interface ChatImage {
  png_b64: string;
  prompt: string;
}

export interface ChatResponse {
  text: string;
  images: ChatImage[];
  task: string;
}

export type FetchLike = (
  input: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{ ok: boolean; status: number; json(): Promise<unknown> }>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = fetch,
  ) {}

  private async post<T>(path: string, body: unknown): Promise<T> {
    const res = await this.fetchImpl(this.baseUrl + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!res.ok) {
      throw new ApiError(res.status, `${path} failed with ${res.status}`);
    }
    return (await res.json()) as T;
  }

  async createSession(): Promise<string> {
    const out = await this.post<{ session_id: string }>("/session", {});
    return out.session_id;
  }

  async chat(
    sessionId: string,
    text: string,
    imageB64?: string,
  ): Promise<ChatResponse> {
    const body: Record<string, string> = { session_id: sessionId, text };
    if (imageB64 !== undefined) body.image_b64 = imageB64;
    return this.post<ChatResponse>("/chat", body);
  }
}
