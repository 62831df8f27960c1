"""Software model of a layer-skipping LLM inference accelerator."""
__version__ = "0.1.0"
