"""Zero-shot anomaly image generation toolkit.

Crossmodal prompt encoding (region-focused masked attention over image
features plus hierarchical long-text encoding), an inpainting diffusion
backbone fine-tuned through low-rank adapters, retrieval-driven prompt
selection, contrastive mask refinement, and the standard detection metrics.
Ships deterministic toy encoders and a toy denoiser so the whole pipeline
runs on CPU without downloads; real models plug in through adapter
interfaces and the model registry.
"""

__version__ = "0.1.0"
