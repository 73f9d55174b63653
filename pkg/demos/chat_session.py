"""A three-turn assistant session against trained artifacts.

Requires a built workspace (default ./artifacts — run `cxrkit eval` or the
train subcommands first, or point CXRKIT_WORKDIR elsewhere). Attaches a test
image, asks for a report, asks a follow-up question, then requests a
generated image.
"""

import os
from pathlib import Path

from cxrkit.assistant import Session
from cxrkit.config import Config
from cxrkit.corpus import load_image, load_split
from cxrkit.pipeline import Workspace


def main():
    workdir = os.environ.get("CXRKIT_WORKDIR", "artifacts")
    ws = Workspace(workdir, Config())
    assistant = ws.build_assistant()
    session = Session.create()

    record = load_split(ws.corpus_dir, "test")[0]
    image = load_image(ws.corpus_dir, "test", record.record_id)
    print(f"attaching {record.record_id}; true report: {record.text}\n")

    turns = [
        ("Generate a report of this chest x-ray", image),
        ("Is there a pleural effusion?", None),
        ("Please generate a lateral view of a chest X-ray "
         "with a small right pleural effusion", None),
    ]
    out_dir = Path(workdir) / "demo-images"
    for text, img in turns:
        print(f"you> {text}")
        reply = assistant.handle_turn(session, text, image=img)
        print(f"assistant[{reply.task}]> {reply.text}")
        for gen in reply.images:
            out_dir.mkdir(parents=True, exist_ok=True)
            path = out_dir / f"{gen.id}.png"
            path.write_bytes(gen.png_bytes())
            print(f"  saved {path}  (prompt: {gen.prompt})")
        print()
    print(f"session history entries: {len(session.history)}")


if __name__ == "__main__":
    main()
