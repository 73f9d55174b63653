/** Pure state → HTML rendering; main.ts mounts it and wires events. */

import { ThreadState } from "./state.js";

function esc(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function render(state: ThreadState): string {
  const parts: string[] = ['<div class="thread">'];
  for (const msg of state.messages) {
    parts.push(`<div class="bubble ${msg.role}">`);
    parts.push(`<p>${esc(msg.text)}</p>`);
    for (const img of msg.images) {
      parts.push(
        '<figure class="image-card">' +
          `<img src="data:image/png;base64,${img.png_b64}" alt="generated chest X-ray" />` +
          `<figcaption>${esc(img.prompt)}</figcaption>` +
          "</figure>",
      );
    }
    parts.push("</div>");
  }
  if (state.pending) {
    parts.push('<div class="bubble assistant pending">…</div>');
  }
  parts.push("</div>");

  if (state.notice !== null) {
    parts.push(
      '<div class="notice" role="alert">' +
        `<span>${esc(state.notice)}</span>` +
        (state.retry !== null
          ? '<button data-action="retry">Retry</button>'
          : "") +
        '<button data-action="dismiss">Dismiss</button></div>',
    );
  }

  if (state.attachment !== null) {
    parts.push(
      '<div class="attachment-preview">' +
        `<img src="data:image/png;base64,${state.attachment.b64}" alt="attachment preview" />` +
        `<span>${esc(state.attachment.name)}</span>` +
        '<button data-action="clear-attachment">Clear</button></div>',
    );
  }

  const disabled = state.pending ? " disabled" : "";
  parts.push(
    '<form class="composer" data-action="send">' +
      viewToggle(state) +
      `<input name="message" type="text" placeholder="Ask the assistant…"${disabled} />` +
      `<input name="file" type="file" accept="image/png"${disabled} />` +
      `<button type="submit"${disabled}>Send</button></form>`,
  );
  return parts.join("");
}

function viewToggle(state: ThreadState): string {
  const options = ["PA", "Lateral"] as const;
  const buttons = options
    .map((v) => {
      const active = state.view === v ? ' class="active"' : "";
      return `<button type="button" data-action="view" data-view="${v}"${active}>${v}</button>`;
    })
    .join("");
  return `<div class="view-toggle">${buttons}</div>`;
}
