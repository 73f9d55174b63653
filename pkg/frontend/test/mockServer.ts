/** In-memory mock of the documented HTTP API, exposed as a FetchLike. */

import { FetchLike } from "../src/api.js";

const TINY_PNG_B64 =
  "iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAAAAAA6fptVAAAACklEQVR4nGNiAAAABgADNjd8qAAAAABJRU5ErkJggg==";

export interface MockOptions {
  failNext?: boolean;
  delayMs?: number;
}

export function createMockServer(options: MockOptions = {}) {
  const sessions = new Set<string>();
  let counter = 0;
  const log: { path: string; body: unknown }[] = [];

  const fetchImpl: FetchLike = async (input, init) => {
    const path = input.replace(/^https?:\/\/[^/]+/, "");
    const body = init?.body !== undefined ? JSON.parse(init.body) : {};
    log.push({ path, body });
    if (options.delayMs) {
      await new Promise((r) => setTimeout(r, options.delayMs));
    }
    if (options.failNext) {
      options.failNext = false;
      throw new TypeError("network error");
    }

    const reply = (status: number, payload: unknown) => ({
      ok: status < 400,
      status,
      json: async () => payload,
    });

    if (path === "/session") {
      const id = `session-${++counter}`;
      sessions.add(id);
      return reply(200, { session_id: id });
    }
    if (path === "/chat") {
      if (!sessions.has(body.session_id)) {
        return reply(404, { detail: "unknown session" });
      }
      const text: string = body.text;
      if (/\b(generate|create|draw|produce|make|show)\b/i.test(text)) {
        const view = /lateral/i.test(text) ? "Lateral" : "PA";
        return reply(200, {
          text: "Certainly: [image 1]",
          images: [
            {
              png_b64: TINY_PNG_B64,
              prompt: `${view} view of the chest was obtained. No acute cardiopulmonary process.`,
            },
          ],
          task: "generate",
        });
      }
      return reply(200, {
        text: body.image_b64
          ? "PA view of the chest was obtained. No acute cardiopulmonary process."
          : "Hello! Attach an image or ask me to generate one.",
        images: [],
        task: body.image_b64 ? "report" : "chat",
      });
    }
    return reply(404, { detail: "no such route" });
  };

  return { fetchImpl, log };
}
