import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { isRejection, validateBytes, MAX_BYTES } from "../src/attachment.js";
import { decorate, ThreadController, VIEW_PHRASES } from "../src/state.js";
import { render } from "../src/view.js";
import { createMockServer } from "./mockServer.js";

function controller(opts = {}) {
  const mock = createMockServer(opts);
  const api = new ApiClient("", mock.fetchImpl);
  return { ctl: new ThreadController(api), mock };
}

const PNG_BYTES = new Uint8Array([
  0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 1, 2, 3,
]);
const JPEG_BYTES = new Uint8Array([0xff, 0xd8, 0xff, 0xe0, 1, 2, 3]);

describe("send_message", () => {
  it("text-only request yields one assistant bubble and zero images", async () => {
    const { ctl } = controller();
    await ctl.send("hello there");
    expect(ctl.state.messages).toHaveLength(2);
    const reply = ctl.state.messages[1];
    expect(reply.role).toBe("assistant");
    expect(reply.images).toHaveLength(0);
    const html = render(ctl.state);
    expect(html).not.toContain("image-card");
  });

  it("generation request renders an image card with the prompt caption", async () => {
    const { ctl } = controller();
    await ctl.send("generate a lateral view of a chest X-ray");
    const reply = ctl.state.messages[1];
    expect(reply.images.length).toBeGreaterThanOrEqual(1);
    const html = render(ctl.state);
    expect(html).toContain("image-card");
    expect(html).toContain(
      "Lateral view of the chest was obtained. No acute cardiopulmonary process.",
    );
  });

  it("disables a second submit while one is pending", async () => {
    const { ctl } = controller({ delayMs: 5 });
    const first = ctl.send("generate an image of a chest x-ray");
    expect(ctl.state.pending).toBe(true);
    expect(render(ctl.state)).toContain("disabled");
    const second = await ctl.send("another one");
    expect(second).toBe(false);
    await first;
    expect(ctl.state.messages).toHaveLength(2); // one user, one assistant
  });

  it("network failure keeps the thread unchanged and offers retry", async () => {
    const opts = { failNext: true };
    const { ctl } = controller(opts);
    const ok = await ctl.send("hello");
    expect(ok).toBe(false);
    expect(ctl.state.messages).toHaveLength(0);
    expect(ctl.state.notice).toMatch(/failed/i);
    expect(ctl.state.retry).not.toBeNull();
    expect(render(ctl.state)).toContain('data-action="retry"');
    // retry succeeds and replays the exact turn
    const retried = await ctl.retryLast();
    expect(retried).toBe(true);
    expect(ctl.state.messages).toHaveLength(2);
    expect(ctl.state.notice).toBeNull();
  });

  it("notices are dismissible", async () => {
    const { ctl } = controller({ failNext: true });
    await ctl.send("hello");
    ctl.dismissNotice();
    expect(ctl.state.notice).toBeNull();
    expect(render(ctl.state)).not.toContain("notice");
  });
});

describe("attach_image", () => {
  it("accepts a small PNG and stages it for the next send", async () => {
    const result = validateBytes("scan.png", PNG_BYTES);
    expect(isRejection(result)).toBe(false);
    const { ctl, mock } = controller();
    if (!isRejection(result)) ctl.setAttachment(result);
    expect(render(ctl.state)).toContain("attachment-preview");
    await ctl.send("Generate a report of this chest x-ray");
    const chat = mock.log.find((e) => e.path === "/chat");
    expect((chat?.body as { image_b64?: string }).image_b64).toBeDefined();
    // attachment is consumed by the send
    expect(ctl.state.attachment).toBeNull();
  });

  it("rejects JPEG and oversized files with a message", () => {
    const jpeg = validateBytes("scan.jpg", JPEG_BYTES);
    expect(isRejection(jpeg)).toBe(true);
    if (isRejection(jpeg)) expect(jpeg.reason).toMatch(/PNG/);
    const big = new Uint8Array(MAX_BYTES + 1);
    big.set(PNG_BYTES);
    const over = validateBytes("big.png", big);
    expect(isRejection(over)).toBe(true);
    if (isRejection(over)) expect(over.reason).toMatch(/1 MiB/);
  });

  it("clearing the attachment omits the image field on the next send", async () => {
    const { ctl, mock } = controller();
    const result = validateBytes("scan.png", PNG_BYTES);
    if (!isRejection(result)) ctl.setAttachment(result);
    ctl.setAttachment(null);
    await ctl.send("hello");
    const chat = mock.log.find((e) => e.path === "/chat");
    expect(
      (chat?.body as { image_b64?: string }).image_b64,
    ).toBeUndefined();
  });
});

describe("view_controls", () => {
  it("prepends the chosen view phrase to the outgoing text", async () => {
    const { ctl, mock } = controller();
    ctl.setView("Lateral");
    await ctl.send("show a large effusion");
    const chat = mock.log.find((e) => e.path === "/chat");
    expect((chat?.body as { text: string }).text).toBe(
      `${VIEW_PHRASES.Lateral} show a large effusion`,
    );
  });

  it("toggle off leaves text unmodified", () => {
    expect(decorate("show a large effusion", null)).toBe(
      "show a large effusion",
    );
  });

  it("toggle state persists across turns in the thread", async () => {
    const { ctl, mock } = controller();
    ctl.setView("PA");
    await ctl.send("first");
    await ctl.send("second");
    const chats = mock.log.filter((e) => e.path === "/chat");
    for (const c of chats) {
      expect((c.body as { text: string }).text.startsWith(VIEW_PHRASES.PA)).toBe(
        true,
      );
    }
  });
});

describe("state purity", () => {
  it("rendering is a pure function of the log plus pending flag", async () => {
    const { ctl } = controller();
    await ctl.send("generate a chest x-ray image");
    const snapshot = JSON.parse(JSON.stringify(ctl.state));
    expect(render(snapshot)).toBe(render(ctl.state));
  });
});
