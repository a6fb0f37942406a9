"""How in-context learning appears and then fades in a minimal attention-only transformer.

Modules:
    engine    tensors, tape autodiff, Adam
    data      synthetic class bank and episode samplers
    model     1-2 layer attention-only transformer with hooks
    trainer   training campaigns, evaluator suites, checkpoints
    probes    mechanistic measurements (attention, ablations, clamps)
    toy       tensor-product toy model of strategy coopetition
    cli       command-line front end
"""

__version__ = "0.1.0"
