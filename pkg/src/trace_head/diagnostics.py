"""End-to-end gradient check on a toy-sized model."""
from __future__ import annotations

from .data import gen_synthetic
from .diffnum import GradCheckReport, RngStream, check_gradient
from .encoder import EncoderConfig
from .model import ModelConfig, TraceModel

TOY_CONFIG = ModelConfig(
    encoder=EncoderConfig(vocab_size=64, max_len=16, width=8, num_layers=2, num_heads=2, ffn_mult=2),
    h1=6,
    h2=4,
    dropout=0.2,
    D=5,
    d_img=4,
)


def toy_setup(seed: int = 0, n_trainable: int = 1, count: int = 2, K: int = 3):
    model = TraceModel.init(TOY_CONFIG, seed)
    model.apply_freeze(n_trainable)
    examples = gen_synthetic(count, d_img=TOY_CONFIG.d_img, K=K, alpha=1.0, seed=seed)
    return model, model.make_batch(examples)


def end_to_end_gradcheck(
    seed: int = 0,
    rel_tol: float = 1e-4,
    tau: float = 1.0,
    selection: str = "soft",
    use_rel: bool = True,
) -> GradCheckReport:
    """Check d(l_total)/d(theta) for every trainable tensor of the toy model.

    Dropout is off (eval) and the Gumbel noise is redrawn from the same seed
    on every evaluation, so the loss is a deterministic function of theta.
    """
    model, batch = toy_setup(seed)

    def loss_fn():
        out = model.forward(batch, train=True, tau=tau, selection=selection,
                            gumbel_rng=RngStream(seed, ("gradcheck", "gumbel")))
        return model.losses(out, batch.labels, use_rel)[2]

    return check_gradient(loss_fn, model.store, rel_tol=rel_tol)
