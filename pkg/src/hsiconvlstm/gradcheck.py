"""Central finite-difference gradient checking."""

import numpy as np

DEFAULT_STEP = 1e-5


def numerical_gradient(f, x, step=DEFAULT_STEP, indices=None):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place).

    When ``indices`` (flat positions) is given only those coordinates are
    evaluated and a 1-D array of the same length is returned.
    """
    flat = x.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size if indices is None else len(indices))
    for n, idx in enumerate(coords):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = f()
        flat[idx] = orig - step
        fm = f()
        flat[idx] = orig
        out[idx if indices is None else n] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape) if indices is None else out


def relative_error(analytic, numeric, floor=1e-10):
    """``|a - n| / max(|a|, |n|)`` in the 2-norm, guarded against all-zero gradients."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return diff
    return diff / scale


def check_arrays(f, arrays, analytic, step=DEFAULT_STEP):
    """Compare analytic gradients with finite differences for named arrays.

    ``arrays`` and ``analytic`` are dicts sharing keys. Returns a dict of
    relative errors.
    """
    return {name: relative_error(analytic[name], numerical_gradient(f, arrays[name], step)) for name in arrays}


def model_gradcheck(model, patches, labels, seed=0, per_param=6, step=DEFAULT_STEP):
    """Finite-difference check of every parameter array of a :class:`~hsiconvlstm.models.Model`.

    Dropout masks are pinned by re-seeding for each loss evaluation. At most
    ``per_param`` randomly chosen entries of each array are perturbed. Returns
    ``{parameter name: relative error}`` in layer order.
    """
    def loss():
        return model.loss_and_grads(patches, labels, rng=np.random.default_rng(seed))[0]

    _, grads, _ = model.loss_and_grads(patches, labels, rng=np.random.default_rng(seed))
    grads = {k: v.copy() for k, v in grads.items()}
    pick = np.random.default_rng(seed + 1)
    errors = {}
    for name, value in model.params().items():
        n = min(per_param, value.size)
        idx = np.sort(pick.choice(value.size, size=n, replace=False))
        numeric = numerical_gradient(loss, value, step, indices=idx)
        errors[name] = relative_error(grads[name].reshape(-1)[idx], numeric)
    return errors
