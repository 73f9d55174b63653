/** Chat thread state: a message log plus a pending flag.
 *
 * The screen is a pure function of this state (see view.ts); every
 * transition returns a new state object, so replaying the log reproduces
 * the screen exactly.
 */

import { ApiClient, ChatImage } from "./api.js";

export interface Message {
  role: "user" | "assistant";
  text: string;
  images: ChatImage[];
}

export interface Attachment {
  name: string;
  b64: string;
}

export interface ThreadState {
  sessionId: string | null;
  messages: Message[];
  pending: boolean;
  attachment: Attachment | null;
  /** PA/Lateral toggle; persists across turns within the thread. */
  view: "PA" | "Lateral" | null;
  notice: string | null;
  /** Set when a send failed and can be retried verbatim. */
  retry: { text: string; imageB64?: string } | null;
}

export function initialState(): ThreadState {
  return {
    sessionId: null,
    messages: [],
    pending: false,
    attachment: null,
    view: null,
    notice: null,
    retry: null,
  };
}

export const VIEW_PHRASES: Record<"PA" | "Lateral", string> = {
  PA: "Generate a PA view of a chest X-ray.",
  Lateral: "Generate a lateral view of a chest X-ray.",
};

/** The outgoing text with the view toggle applied (client-side sugar only). */
export function decorate(text: string, view: ThreadState["view"]): string {
  if (view === null) return text;
  return `${VIEW_PHRASES[view]} ${text}`;
}

export class ThreadController {
  state: ThreadState = initialState();

  constructor(
    private readonly api: ApiClient,
    private readonly onChange: (s: ThreadState) => void = () => {},
  ) {}

  private set(patch: Partial<ThreadState>): void {
    this.state = { ...this.state, ...patch };
    this.onChange(this.state);
  }

  async ensureSession(): Promise<string> {
    if (this.state.sessionId === null) {
      this.set({ sessionId: await this.api.createSession() });
    }
    return this.state.sessionId as string;
  }

  setView(view: ThreadState["view"]): void {
    this.set({ view });
  }

  setAttachment(attachment: Attachment | null): void {
    this.set({ attachment });
  }

  dismissNotice(): void {
    this.set({ notice: null });
  }

  /** Sends one turn. Returns false when refused (already pending or empty). */
  async send(rawText: string): Promise<boolean> {
    if (this.state.pending || rawText.trim() === "") return false;
    const text = decorate(rawText.trim(), this.state.view);
    const imageB64 = this.state.attachment?.b64;
    return this.dispatch(text, imageB64);
  }

  /** Re-sends the failed turn verbatim. */
  async retryLast(): Promise<boolean> {
    const r = this.state.retry;
    if (r === null || this.state.pending) return false;
    return this.dispatch(r.text, r.imageB64);
  }

  private async dispatch(
    text: string,
    imageB64: string | undefined,
  ): Promise<boolean> {
    const before = this.state.messages;
    this.set({
      messages: [...before, { role: "user", text, images: [] }],
      pending: true,
      notice: null,
      retry: null,
      attachment: null,
    });
    try {
      const sessionId = await this.ensureSession();
      const reply = await this.api.chat(sessionId, text, imageB64);
      this.set({
        messages: [
          ...this.state.messages,
          { role: "assistant", text: reply.text, images: reply.images },
        ],
        pending: false,
      });
      return true;
    } catch (err) {
      // failed turn leaves the thread log unchanged; offer a retry instead
      this.set({
        messages: before,
        pending: false,
        notice: `Request failed: ${err instanceof Error ? err.message : err}`,
        retry: { text, imageB64 },
      });
      return false;
    }
  }
}
