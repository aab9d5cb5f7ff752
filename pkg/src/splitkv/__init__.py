"""Split-prompt LLM inference: cloud prompt KV computed remotely and streamed
per layer, edge prompt computed locally, attention fused exactly."""

__version__ = "0.1.0"
