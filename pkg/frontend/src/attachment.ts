/** Client-side attachment validation: PNG only, at most 1 MiB. */

import { Attachment } from "./state.js";

export const MAX_BYTES = 1024 * 1024;
const PNG_MAGIC = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];

export interface Rejection {
  reason: string;
}

export function validateBytes(
  name: string,
  bytes: Uint8Array,
): Attachment | Rejection {
  if (bytes.length > MAX_BYTES) {
    return { reason: `file is ${bytes.length} bytes; limit is 1 MiB` };
  }
  const isPng =
    bytes.length >= PNG_MAGIC.length &&
    PNG_MAGIC.every((b, i) => bytes[i] === b);
  if (!isPng) {
    return { reason: "only PNG images are accepted" };
  }
  return { name, b64: toBase64(bytes) };
}

export function isRejection(x: Attachment | Rejection): x is Rejection {
  return (x as Rejection).reason !== undefined;
}

function toBase64(bytes: Uint8Array): string {
  let bin = "";
  for (const b of bytes) bin += String.fromCharCode(b);
  return btoa(bin);
}
