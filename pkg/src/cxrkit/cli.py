"""Command-line entry point.

Subcommands map one-to-one onto pipeline build steps plus `eval`, a terminal
`chat` REPL, and `serve`. Exit codes: 0 success, 2 usage error (argparse),
1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import Config
from .pipeline import Workspace, run_eval

log = logging.getLogger("cxrkit")


def _load_config(args) -> Config:
    if args.config:
        return Config.from_file(args.config)
    return Config().apply_env()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cxrkit",
        description="Multimodal chest X-ray assistant: corpus, training, "
                    "evaluation, and serving.")
    parser.add_argument("--config", help="JSON config file (env vars "
                        "MEDX_<KEY> override)", default=None)
    parser.add_argument("--workdir", default="artifacts",
                        help="artifact directory (default: ./artifacts)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("build-corpus", help="render the synthetic corpus")
    sub.add_parser("build-instructions",
                   help="synthesize instruction dialogues")
    sub.add_parser("train-aligner", help="train the image/text aligner")
    sub.add_parser("train-lm", help="pretrain and instruction-tune the LM")
    sub.add_parser("train-sd-base", help="train the base diffusion model")
    sub.add_parser("finetune-sd-control",
                   help="attach and fine-tune the control branch")
    sub.add_parser("train-classifier",
                   help="train the downstream pathology classifier")

    p_eval = sub.add_parser("eval", help="run the full evaluation suite")
    p_eval.add_argument("--split", default="test", choices=["test", "val"])
    p_eval.add_argument("--out", default=None,
                        help="metrics path (default: <workdir>/metrics.json)")
    p_eval.add_argument("--gen-images", type=int, default=100)

    p_chat = sub.add_parser("chat", help="interactive terminal REPL")
    p_chat.add_argument("--image", default=None,
                        help="attach this PNG on the first turn")

    p_serve = sub.add_parser("serve", help="run the HTTP API")
    p_serve.add_argument("--host", default=None)
    p_serve.add_argument("--port", type=int, default=None)
    return parser


def cmd_eval(ws: Workspace, args) -> int:
    results = run_eval(ws, split=args.split, n_gen_images=args.gen_images)
    out = Path(args.out) if args.out else ws.root / "metrics.json"
    out.write_text(json.dumps(results, indent=2, sort_keys=True))
    print(f"wrote {out}")
    return 0


def cmd_chat(ws: Workspace, args) -> int:
    from .assistant import Session
    from .corpus import load_png

    assistant = ws.build_assistant()
    session = Session.create()
    image = load_png(args.image) if args.image else None
    out_dir = ws.root / "chat-images"
    print("cxrkit chat — type a message, 'quit' to exit.")
    while True:
        try:
            text = input("you> ").strip()
        except EOFError:
            break
        if not text or text.lower() in ("quit", "exit"):
            break
        reply = assistant.handle_turn(session, text, image=image)
        image = None  # only attach once
        print(f"assistant[{reply.task}]> {reply.text}")
        for img in reply.images:
            out_dir.mkdir(parents=True, exist_ok=True)
            path = out_dir / f"{img.id}.png"
            path.write_bytes(img.png_bytes())
            print(f"  saved {path} ({img.prompt})")
    return 0


def cmd_serve(ws: Workspace, args) -> int:
    import uvicorn

    from .server import create_app

    host = args.host or ws.config.host
    port = ws.config.port if args.port is None else args.port
    app = create_app(ws)
    server = uvicorn.Server(uvicorn.Config(app, host=host, port=port,
                                           log_level="info"))
    # bind before serving so an ephemeral port (--port 0) can be printed
    import asyncio
    import socket

    async def _run():
        sock = socket.create_server((host, port))
        print(f"listening on http://{sock.getsockname()[0]}:"
              f"{sock.getsockname()[1]}")
        await server.serve(sockets=[sock])

    asyncio.run(_run())
    return 0


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format='{"time": "%(asctime)s", "level": "%(levelname)s", '
               '"logger": "%(name)s", "message": "%(message)s"}')
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args)
        ws = Workspace(args.workdir, config)
        if args.command == "build-corpus":
            ws.ensure_corpus()
        elif args.command == "build-instructions":
            ws.ensure_dialogues()
        elif args.command == "train-aligner":
            ws.ensure_aligner()
        elif args.command == "train-lm":
            ws.ensure_lm()
        elif args.command == "train-sd-base":
            from . import diffusion
            aligner = ws.ensure_aligner()
            base, _, hist = diffusion.train_base(ws.ensure_corpus(), aligner,
                                                 config)
            diffusion.save_model(ws.root / "sd_base.mxc", base, config)
        elif args.command == "finetune-sd-control":
            ws.ensure_sd()
        elif args.command == "train-classifier":
            ws.ensure_classifier()
        elif args.command == "eval":
            return cmd_eval(ws, args)
        elif args.command == "chat":
            return cmd_chat(ws, args)
        elif args.command == "serve":
            return cmd_serve(ws, args)
        return 0
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("command failed: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
