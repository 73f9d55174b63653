/** Browser entry point: mounts the rendered thread and wires events. */

import { ApiClient } from "./api.js";
import { isRejection, validateBytes } from "./attachment.js";
import { ThreadController } from "./state.js";
import { render } from "./view.js";

const root = document.getElementById("app") as HTMLElement;
const api = new ApiClient("");
const controller = new ThreadController(api, (state) => {
  root.innerHTML = render(state);
});
root.innerHTML = render(controller.state);

root.addEventListener("click", (ev) => {
  const target = ev.target as HTMLElement;
  const action = target.dataset.action;
  if (action === "dismiss") controller.dismissNotice();
  if (action === "retry") void controller.retryLast();
  if (action === "clear-attachment") controller.setAttachment(null);
  if (action === "view") {
    const view = target.dataset.view as "PA" | "Lateral";
    controller.setView(controller.state.view === view ? null : view);
  }
});

root.addEventListener("submit", (ev) => {
  ev.preventDefault();
  const form = ev.target as HTMLFormElement;
  const input = form.elements.namedItem("message") as HTMLInputElement;
  void controller.send(input.value);
});

root.addEventListener("change", async (ev) => {
  const input = ev.target as HTMLInputElement;
  if (input.name !== "file" || !input.files?.length) return;
  const file = input.files[0];
  const bytes = new Uint8Array(await file.arrayBuffer());
  const result = validateBytes(file.name, bytes);
  if (isRejection(result)) {
    controller.setAttachment(null);
    controller.state = { ...controller.state, notice: result.reason };
    root.innerHTML = render(controller.state);
  } else {
    controller.setAttachment(result);
  }
});
