import torch


def _axis_samples(lo, hi, out, ratio, size):
    """Sample coordinates along one axis with bilinear corner indices and weights."""
    bin_size = (hi - lo) / out
    steps = torch.arange(out, dtype=lo.dtype)[:, None] + (torch.arange(ratio, dtype=lo.dtype)[None, :] + 0.5) / ratio
    pos = lo[:, None] + steps.reshape(1, -1) * bin_size[:, None]  # (n, out * ratio)
    valid = (pos >= -1.0) & (pos <= size)
    pos = pos.clamp(min=0.0)
    low = pos.floor().long()
    at_edge = low >= size - 1
    low = torch.where(at_edge, torch.full_like(low, size - 1), low)
    high = torch.where(at_edge, low, low + 1)
    pos = torch.where(at_edge, low.to(pos.dtype), pos)
    frac = pos - low.to(pos.dtype)
    return low, high, (1.0 - frac) * valid, frac * valid


def interpolation_matrix(
    boxes: torch.Tensor,
    height: int,
    width: int,
    output_size: int = 7,
    spatial_scale: float = 1.0 / 8,
    sampling_ratio: int = 2,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Dense ``(n * out * out, height * width)`` matrix mapping a flattened map to RoI bins.

    Box coordinates are shifted by half a feature cell so that pixel centres
    line up with feature-cell centres. Each bin averages
    ``sampling_ratio ** 2`` bilinear samples.
    """
    n, r, o = boxes.shape[0], sampling_ratio, output_size
    boxes = boxes.detach().to(dtype) * spatial_scale - 0.5
    yl, yh, wyl, wyh = _axis_samples(boxes[:, 1], boxes[:, 3], o, r, height)
    xl, xh, wxl, wxh = _axis_samples(boxes[:, 0], boxes[:, 2], o, r, width)
    # rows: (roi, bin_y, bin_x); every row receives r*r samples x 4 corners
    bins = torch.arange(n * o * o).reshape(n, o, 1, o, 1).expand(n, o, r, o, r)
    rows, cols, vals = [], [], []
    for yi, wy in ((yl, wyl), (yh, wyh)):
        for xi, wx in ((xl, wxl), (xh, wxh)):
            idx = yi[:, :, None] * width + xi[:, None, :]
            w = wy[:, :, None] * wx[:, None, :] / (r * r)
            rows.append(bins.reshape(-1))
            cols.append(idx.reshape(n, o, r, o, r).reshape(-1))
            vals.append(w.reshape(n, o, r, o, r).reshape(-1))
    mat = torch.zeros(n * o * o, height * width, dtype=dtype)
    mat.index_put_((torch.cat(rows), torch.cat(cols)), torch.cat(vals), accumulate=True)
    return mat


def apply_interpolation(features: torch.Tensor, mat: torch.Tensor, output_size: int = 7) -> torch.Tensor:
    c = features.shape[0]
    n = mat.shape[0] // (output_size * output_size)
    out = mat @ features.reshape(c, -1).t()
    return out.reshape(n, output_size, output_size, c).permute(0, 3, 1, 2)


def roi_align(
    features: torch.Tensor,
    boxes: torch.Tensor,
    output_size: int = 7,
    spatial_scale: float = 1.0 / 8,
    sampling_ratio: int = 2,
) -> torch.Tensor:
    """Bilinear RoI-Align of one ``(C, h, w)`` map over ``(n, 4)`` image-space boxes.

    Returns ``(n, C, output_size, output_size)``; differentiable in ``features``.
    """
    c, h, w = features.shape
    if boxes.shape[0] == 0:
        return features.new_zeros((0, c, output_size, output_size))
    mat = interpolation_matrix(boxes, h, w, output_size, spatial_scale, sampling_ratio, features.dtype)
    return apply_interpolation(features, mat, output_size)
