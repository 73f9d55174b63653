"""cxrkit: a self-contained synthetic chest X-ray multimodal pipeline.

Submodules:
    rng        seeded random streams
    tensor     autodiff tensors
    optim      Adam
    linalg     PSD matrix square root
    gradcheck  finite-difference gradient verification
    corpus     synthetic image/report corpus
    instruct   instruction dialogue construction
    aligner    contrastive image/text encoders
    lm         decoder LM with low-rank adapters
    diffusion  denoising diffusion generator with control branch
    assistant  multi-turn task orchestration
    metrics    text/image/classification metrics
    classifier downstream multi-label image classifier
    checkpoint binary checkpoint format
    config     run configuration
    cli        command-line entry points
    server     HTTP API
"""

__version__ = "0.1.0"
