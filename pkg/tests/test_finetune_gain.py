"""Fine-tuning must beat the pretrained-only model (head trained on frozen codes)."""

import pytest

from atlnet.autoencoder import SaeHyper
from atlnet.network import FinetuneConfig
from experiments import SEEDS, finetune_gain


@pytest.mark.slow
def test_finetuning_improves_held_out_oa_with_preset():
    gains = [finetune_gain(s) for s in SEEDS]
    wins = sum(after > before for before, after in gains)
    print(f"fine-tuning wins {wins}/10: {[(round(b, 3), round(a, 3)) for b, a in gains]}")
    assert wins >= 9


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="with lr 0.05 and batch 128 on ~50 samples neither model leaves chance level")
def test_finetuning_improves_held_out_oa_with_literal_defaults():
    gains = [finetune_gain(s, SaeHyper(), FinetuneConfig()) for s in SEEDS]
    assert sum(after > before for before, after in gains) >= 9
