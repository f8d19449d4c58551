import numpy as np
import pytest

# Published per-AU test performance of the reference model, used as a
# self-contained arithmetic fixture (means, inclusion filter).
TABLE2_F1 = {
    1: 0.54, 2: 0.56, 4: 0.42, 6: 0.78, 7: 0.76, 9: 0.36, 10: 0.84, 12: 0.85,
    14: 0.58, 15: 0.45, 17: 0.62, 20: 0.1, 23: 0.5, 24: 0.43, 25: 0.83,
    26: 0.55, 27: 0.42, 43: 0.68,
}
TABLE2_ACC = {
    1: 0.86, 2: 0.88, 4: 0.91, 6: 0.9, 7: 0.88, 9: 0.97, 10: 0.9, 12: 0.92,
    14: 0.63, 15: 0.93, 17: 0.85, 20: 0.98, 23: 0.83, 24: 0.89, 25: 0.9,
    26: 0.91, 27: 0.99, 43: 0.8,
}
INCLUDED_AUS = {1, 2, 6, 7, 10, 12, 17, 23, 25, 26, 43}


@pytest.fixture
def table2_report():
    from aucues.metrics import MetricsReport

    return MetricsReport(f1=dict(TABLE2_F1), accuracy=dict(TABLE2_ACC))


def random_masked_batch(rng, batch_size=None, mask_density=None):
    """Random logits/labels/mask triple with consistent -1 placement."""
    b = batch_size or int(rng.integers(1, 65))
    density = mask_density if mask_density is not None else rng.uniform(0, 1)
    logits = rng.normal(0, 3, (b, 18))
    mask = (rng.uniform(size=(b, 18)) < density).astype(np.int64)
    labels = rng.integers(0, 2, (b, 18))
    labels = np.where(mask == 1, labels, -1)
    return logits, labels, mask
