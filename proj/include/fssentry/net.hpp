#pragma once

#include <string>
#include <vector>

#include "fssentry/rng.hpp"
#include "fssentry/tensor.hpp"

namespace fssentry {

enum class LayerKind { conv, fc, act, down2, up2 };
enum class ActKind { relu, sigmoid };

struct LayerSpec {
    LayerKind kind;
    size_t k = 0, pad = 0;     // conv
    size_t in = 0, out = 0;    // conv channels / fc dims
    ActKind act = ActKind::relu;

    static LayerSpec conv2d(size_t in_ch, size_t out_ch, size_t k);
    static LayerSpec fully_connected(size_t in_dim, size_t out_dim);
    static LayerSpec activation(ActKind a);
    static LayerSpec downsample2();
    static LayerSpec upsample2();

    std::string to_string() const;
    static LayerSpec parse(const std::string& line);
};

/// Sequential network over the fixed layer vocabulary. Parameters live in
/// `params[i]` aligned with `layers[i]` (conv/fc carry {w, b}, the rest are
/// empty). Forward output shape is a pure function of input shape and specs.
struct Network {
    std::string topology; // encoder | decoder | relation_head
    std::vector<LayerSpec> layers;
    std::vector<std::vector<Tensor>> params;

    void init_params(RngStream& rng);

    std::vector<size_t> out_shape(const std::vector<size_t>& in_shape) const;

    /// Plain float32 inference (no gradient bookkeeping).
    Tensor forward(const Tensor& batch) const;

    size_t param_count() const;

    /// Flat views over all parameter tensors, ordered by (layer, slot).
    std::vector<Tensor*> param_list();
    std::vector<const Tensor*> param_list() const;
};

/// Desk-scale backbone: three (3x3 conv, relu, 2x down) blocks with widths
/// 16/32/64 over 16x16x3 inputs, giving a 2x2x64 feature map.
Network make_desk_encoder(RngStream& rng);
/// Mirror of the desk encoder: three (2x up, 3x3 conv) blocks, sigmoid output.
Network make_desk_decoder(RngStream& rng);
/// Two fully connected layers to a scalar relation score.
Network make_relation_head(size_t feat_dim, size_t hidden, RngStream& rng);

void save_network(const Network& net, const std::string& dir, const std::string& prefix);
Network load_network(const std::string& dir, const std::string& prefix);

} // namespace fssentry
