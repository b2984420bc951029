// Multiplicative two-modality fusion.
//
// The silhouette feature map (B, C, T, H', W') is zero-padded to square
// spatial extent Hmax = max(H', W'). The per-frame pose/shape embedding
// (B, T, D') with D' = Hmax^2 is reshaped row-major into a matrix
// (B, 1, T, Hmax, Hmax) and broadcast across the C channels. Each frame's
// feature map S is then refined as
//
//     fused = S @ (I + M)
//
// so a zero pose/shape matrix leaves the silhouette features exactly
// unchanged (identity fallback). A max over the time axis collapses the
// sequence into one (B, C, Hmax, Hmax) map.

#pragma once

#include "combogait/tensor.hpp"

namespace combogait {

// (B, C, T, H', W') -> (B, C, T, Hmax, Hmax), Hmax = max(H', W').
template <typename S>
TensorT<S> pad_to_square(Tape<S>* tape, const TensorT<S>& e_sil) {
    if (e_sil.ndim() != 5) {
        throw DimensionError("pad_to_square: need (B, C, T, H, W), got " +
                             shape_str(e_sil.shape()));
    }
    const int64_t h = e_sil.dim(3), w = e_sil.dim(4);
    const int64_t hmax = std::max(h, w);
    return pad_bottom_right(tape, e_sil, hmax - h, hmax - w);
}

// (B, T, D') -> (B, 1, T, Hmax, Hmax); requires D' == Hmax^2.
template <typename S>
TensorT<S> smpl_to_matrix(Tape<S>* tape, const TensorT<S>& e_smpl, int64_t hmax) {
    if (e_smpl.ndim() != 3) {
        throw DimensionError("smpl_to_matrix: need (B, T, D'), got " +
                             shape_str(e_smpl.shape()));
    }
    const int64_t d = e_smpl.dim(2);
    if (d != hmax * hmax) {
        throw DimensionError("smpl_to_matrix: embedding width " + std::to_string(d) +
                             " is not " + std::to_string(hmax) + "^2; the pose/shape "
                             "embedding must fill a square matrix");
    }
    return reshape(tape, e_smpl, {e_smpl.dim(0), 1, e_smpl.dim(1), hmax, hmax});
}

// (B, 1, T, H, H) -> (B, C, T, H, H).
template <typename S>
TensorT<S> broadcast_channels(Tape<S>* tape, const TensorT<S>& m, int64_t channels) {
    if (m.ndim() != 5 || m.dim(1) != 1) {
        throw DimensionError("broadcast_channels: need (B, 1, T, H, H), got " +
                             shape_str(m.shape()));
    }
    return broadcast_axis(tape, m, 1, channels);
}

// fused = sil @ (I + smpl_matrix), per (batch, channel, frame) slice.
template <typename S>
TensorT<S> fuse_multiplicative(Tape<S>* tape, const TensorT<S>& sil,
                               const TensorT<S>& smpl_matrix) {
    if (sil.ndim() != 5 || smpl_matrix.ndim() != 5) {
        throw DimensionError("fuse: need two (B, C, T, H, H) tensors, got " +
                             shape_str(sil.shape()) + " and " + shape_str(smpl_matrix.shape()));
    }
    if (sil.shape() != smpl_matrix.shape()) {
        throw DimensionError("fuse: operand shapes differ: " + shape_str(sil.shape()) +
                             " vs " + shape_str(smpl_matrix.shape()));
    }
    const int64_t h = sil.dim(3);
    if (sil.dim(4) != h) {
        throw DimensionError("fuse: spatial extent must be square, got " +
                             shape_str(sil.shape()));
    }
    TensorT<S> eye = TensorT<S>::identity(h);
    TensorT<S> shifted = add(tape, smpl_matrix, eye);  // I broadcasts over (B, C, T)
    return matmul(tape, sil, shifted);
}

// Max over the time axis: (B, C, T, H, H) -> (B, C, H, H).
template <typename S>
TensorT<S> temporal_pool(Tape<S>* tape, const TensorT<S>& fused) {
    if (fused.ndim() != 5) {
        throw DimensionError("temporal_pool: need (B, C, T, H, H), got " +
                             shape_str(fused.shape()));
    }
    if (fused.dim(2) == 0) {
        throw DataError("temporal_pool: empty sequence (T = 0)");
    }
    return max_axis(tape, fused, 2);
}

// Full fusion stage: encoders' outputs in, pooled square feature map out.
template <typename S>
TensorT<S> fuse_modalities(Tape<S>* tape, const TensorT<S>& e_sil, const TensorT<S>& e_smpl) {
    TensorT<S> sil_sq = pad_to_square(tape, e_sil);
    const int64_t hmax = sil_sq.dim(3);
    TensorT<S> m = smpl_to_matrix(tape, e_smpl, hmax);
    m = broadcast_channels(tape, m, sil_sq.dim(1));
    TensorT<S> fused = fuse_multiplicative(tape, sil_sq, m);
    return temporal_pool(tape, fused);
}

// Silhouette-only variant (fusion disabled): pad and pool, skipping the
// multiplicative refinement entirely.
template <typename S>
TensorT<S> pool_silhouette_only(Tape<S>* tape, const TensorT<S>& e_sil) {
    return temporal_pool(tape, pad_to_square(tape, e_sil));
}

}  // namespace combogait
