"""Serve the loss API: python -m clip_service [--host H] [--port P] [--encoder rn50|hashed]."""

import argparse

import uvicorn

from .app import ServiceConfig, create_app


def main():
    parser = argparse.ArgumentParser(description="CLIP-style image/text loss service")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8731)
    parser.add_argument("--encoder", default="rn50", choices=["rn50", "hashed"],
                        help="rn50 needs open-clip weights; hashed is self-contained")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--logit-scale", type=float, default=None,
                        help="optional multiplier on the cosine similarities (default: raw)")
    args = parser.parse_args()
    config = ServiceConfig(host=args.host, port=args.port, encoder=args.encoder,
                           device=args.device, logit_scale=args.logit_scale)
    uvicorn.run(create_app(config), host=config.host, port=config.port)


if __name__ == "__main__":
    main()
