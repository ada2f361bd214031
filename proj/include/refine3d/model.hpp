#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "refine3d/conv.hpp"
#include "refine3d/ops.hpp"
#include "refine3d/rng.hpp"
#include "refine3d/tensor.hpp"

namespace refine3d {

// Trainable-parameter partitions. Numeric values are the checkpoint tags.
enum class Partition : uint8_t {
    theta_base = 0,  // encoder + decoder
    phi_att = 1,     // self-attention fuser
    phi_ref = 2,     // volume refiner
    optimizer = 3,   // Adam moments (checkpoint only)
};

struct ModelConfig {
    std::string preset_name;
    int64_t input_size = 0;
    std::vector<int64_t> encoder_channels;
    int64_t latent_dim = 0;
    int64_t heads = 0;
    std::vector<int64_t> decoder_channels;
    int64_t voxel_dim = 0;
    std::vector<int64_t> refiner_channels;

    static ModelConfig paper() {
        ModelConfig c;
        c.preset_name = "paper";
        c.input_size = 127;
        c.encoder_channels = {96, 128, 256, 256, 256, 256};
        c.latent_dim = 1024;
        c.heads = 8;
        c.decoder_channels = {128, 128, 128, 64, 64, 32};
        c.voxel_dim = 32;
        c.refiner_channels = {32, 64, 128};
        return c;
    }

    static ModelConfig desk() {
        ModelConfig c;
        c.preset_name = "desk";
        c.input_size = 32;
        c.encoder_channels = {8, 16, 16, 16};
        c.latent_dim = 64;
        c.heads = 2;
        c.decoder_channels = {16, 16, 8, 8};
        c.voxel_dim = 16;
        c.refiner_channels = {8, 16, 32};
        return c;
    }

    static ModelConfig preset(const std::string& name) {
        if (name == "paper") return paper();
        if (name == "desk") return desk();
        throw ConfigError("unknown preset '" + name + "' (expected paper or desk)");
    }

    // Spatial extent after the encoder's conv/pool stack.
    int64_t encoder_final_extent() const {
        int64_t s = input_size;
        for (size_t i = 0; i < encoder_channels.size(); ++i) s /= 2;
        return s;
    }

    int64_t encoder_flat_dim() const {
        if (encoder_channels.empty()) return 0;
        const int64_t s = encoder_final_extent();
        return encoder_channels.back() * s * s;
    }

    int64_t head_dim() const { return latent_dim / heads; }
    int64_t seed_channels() const { return latent_dim / 8; }

    // Decoder stages 1..upsample_stages double the extent; the rest keep it.
    int64_t upsample_stages() const {
        int64_t u = 0, v = 2;
        while (v < voxel_dim) {
            v *= 2;
            ++u;
        }
        return u;
    }

    // Refiner encoder extents: conv k4 p2 s1 grows by one, pooling halves.
    std::vector<int64_t> refiner_encoder_extents() const {
        std::vector<int64_t> e{voxel_dim};
        int64_t s = voxel_dim;
        for (size_t i = 0; i < refiner_channels.size(); ++i) {
            s = (s + 1) / 2;
            e.push_back(s);
        }
        return e;
    }

    void validate() const {
        if (input_size < 1) throw ConfigError("input_size must be positive");
        if (encoder_channels.empty() || decoder_channels.empty() || refiner_channels.empty())
            throw ConfigError("channel plans must be non-empty");
        for (int64_t c : encoder_channels)
            if (c < 1) throw ConfigError("encoder channels must be positive");
        int64_t s = input_size;
        for (size_t i = 0; i < encoder_channels.size(); ++i) {
            if (s < 2) throw ConfigError("input_size too small for the encoder depth");
            s /= 2;
        }
        if (latent_dim < 8 || latent_dim % 8 != 0)
            throw ConfigError("latent_dim must be a positive multiple of 8 (2x2x2 seed reshape)");
        if (heads < 1 || latent_dim % heads != 0)
            throw ConfigError("latent_dim must be divisible by the head count");
        const int64_t u = upsample_stages();
        if ((int64_t{2} << u) != voxel_dim)
            throw ConfigError("voxel_dim must be 2 * 2^(upsampling stages)");
        if (u > static_cast<int64_t>(decoder_channels.size()))
            throw ConfigError("decoder has fewer stages than required upsamplings");
        auto e = refiner_encoder_extents();
        int64_t rebuilt = e.back();
        for (size_t i = 0; i < refiner_channels.size(); ++i) rebuilt *= 2;
        if (rebuilt != voxel_dim)
            throw ConfigError("refiner pooling chain does not return to voxel_dim");
        if (e.back() < 1) throw ConfigError("refiner bottleneck collapsed to zero extent");
    }
};

enum class InitKind { he, attention_proj, zeros, ones };

struct ParamDef {
    std::string name;
    std::vector<int64_t> shape;
    Partition partition;
    bool trainable;
    InitKind init;
    int64_t fan_in;
};

// Single source of truth for the parameter set: the model constructor
// materializes it and the checkpoint loader validates against it.
std::vector<ParamDef> build_param_plan(const ModelConfig& cfg);

// Trainable element counts; buffers (batchnorm running stats) excluded.
int64_t param_count(const ModelConfig& cfg);
int64_t param_count(const ModelConfig& cfg, Partition p);

template <typename T>
struct ParamEntry {
    std::string name;
    TensorT<T> tensor;
    Partition partition = Partition::theta_base;
    bool trainable = true;
};

// Ordered name -> tensor map with partition tags. Iteration order is the
// insertion (plan) order and is identical on every run.
template <typename T>
class RegistryT {
public:
    TensorT<T>& add(std::string name, Partition partition, TensorT<T> tensor,
                    bool trainable = true) {
        if (index_.count(name)) throw StateError("duplicate parameter name " + name);
        index_[name] = entries_.size();
        entries_.push_back({std::move(name), std::move(tensor), partition, trainable});
        return entries_.back().tensor;
    }

    TensorT<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw StateError("unknown parameter " + name);
        return entries_[it->second].tensor;
    }
    const TensorT<T>& get(const std::string& name) const {
        return const_cast<RegistryT*>(this)->get(name);
    }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<ParamEntry<T>>& entries() { return entries_; }
    const std::vector<ParamEntry<T>>& entries() const { return entries_; }

    void zero_grads() {
        for (auto& e : entries_)
            if (e.trainable) e.tensor.zero_grad();
    }

    int64_t count(Partition p, bool trainable_only = true) const {
        int64_t n = 0;
        for (const auto& e : entries_)
            if (e.partition == p && (!trainable_only || e.trainable)) n += e.tensor.numel();
        return n;
    }

    // Raw little-endian bytes of every tensor in a partition, in order.
    // Used for exact freeze verification.
    std::vector<uint8_t> partition_bytes(Partition p) const {
        std::vector<uint8_t> bytes;
        for (const auto& e : entries_) {
            if (e.partition != p) continue;
            const auto& v = e.tensor.data();
            const uint8_t* raw = reinterpret_cast<const uint8_t*>(v.data());
            bytes.insert(bytes.end(), raw, raw + v.size() * sizeof(T));
        }
        return bytes;
    }

private:
    std::vector<ParamEntry<T>> entries_;
    std::unordered_map<std::string, size_t> index_;
};

// Refine3D network: per-view encoder, multi-head self-attention fuser with a
// residual path, transposed-conv decoder, and a U-Net style volume refiner.
template <typename T>
class ModelT {
public:
    ModelT(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng = substream(seed, 0x6d6f64656cULL);  // independent init stream
        for (const ParamDef& def : build_param_plan(cfg_)) {
            TensorT<T> t = TensorT<T>::zeros(def.shape, def.trainable);
            switch (def.init) {
                case InitKind::he: {
                    const T std = static_cast<T>(std::sqrt(2.0 / static_cast<double>(def.fan_in)));
                    for (T& v : t.data()) v = static_cast<T>(rng.next_normal()) * std;
                    break;
                }
                case InitKind::attention_proj: {
                    const T std =
                        static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg_.latent_dim)));
                    for (T& v : t.data()) v = static_cast<T>(rng.next_normal()) * std;
                    break;
                }
                case InitKind::zeros:
                    break;
                case InitKind::ones:
                    std::fill(t.data().begin(), t.data().end(), T(1));
                    break;
            }
            params_.add(def.name, def.partition, std::move(t), def.trainable);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    RegistryT<T>& params() { return params_; }
    const RegistryT<T>& params() const { return params_; }

    // [3,S,S] image -> [latent_dim] feature vector.
    TensorT<T> encode(const TensorT<T>& image) {
        if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.input_size ||
            image.dim(2) != cfg_.input_size) {
            throw DimensionError("encode: expected image [3," + std::to_string(cfg_.input_size) +
                                 "," + std::to_string(cfg_.input_size) + "], got " +
                                 shape_str(image.shape()));
        }
        TensorT<T> x = reshape(image, {1, 3, cfg_.input_size, cfg_.input_size});
        const size_t blocks = cfg_.encoder_channels.size();
        for (size_t b = 1; b <= blocks; ++b) {
            const std::string pfx = "enc.b" + std::to_string(b) + ".";
            TensorT<T> h = conv2d(x, params_.get(pfx + "conv1.w"), params_.get(pfx + "conv1.b"),
                                  1, 1);
            h = leaky_relu(h);
            h = conv2d(h, params_.get(pfx + "conv2.w"), params_.get(pfx + "conv2.b"), 1, 1);
            if (params_.contains(pfx + "skip.w")) {
                TensorT<T> skip =
                    conv2d(x, params_.get(pfx + "skip.w"), params_.get(pfx + "skip.b"), 1, 0);
                h = add(h, skip);
            }
            x = maxpool2d(leaky_relu(h));
        }
        TensorT<T> flat = reshape(x, {1, cfg_.encoder_flat_dim()});
        TensorT<T> latent = add_bias(matmul(flat, params_.get("enc.fc.w")),
                                     params_.get("enc.fc.b"));
        return flatten(leaky_relu(latent));
    }

    // Self-attention over the view tokens, with a residual path around the
    // multi-head block: tokens_out = tokens + MultiHead(tokens).
    TensorT<T> attend_tokens(const TensorT<T>& features) {
        if (features.rank() != 2 || features.dim(1) != cfg_.latent_dim)
            throw DimensionError("attend: expected [N," + std::to_string(cfg_.latent_dim) +
                                 "], got " + shape_str(features.shape()));
        const int64_t dk = cfg_.head_dim();
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
        std::vector<TensorT<T>> heads;
        heads.reserve(static_cast<size_t>(cfg_.heads));
        for (int64_t h = 1; h <= cfg_.heads; ++h) {
            const std::string pfx = "att.h" + std::to_string(h) + ".";
            TensorT<T> q = matmul(features, params_.get(pfx + "wq"));
            TensorT<T> k = matmul(features, params_.get(pfx + "wk"));
            TensorT<T> v = matmul(features, params_.get(pfx + "wv"));
            TensorT<T> scores = scalar_mul(matmul(q, transpose2d(k)), scale);
            TensorT<T> weights = softmax(scores, 1);
            heads.push_back(matmul(weights, v));
        }
        TensorT<T> multi = matmul(concat(heads, 1), params_.get("att.wo"));
        return add(features, multi);
    }

    // [N, latent] -> fused [latent]: attention tokens averaged over views.
    TensorT<T> attend(const TensorT<T>& features) {
        return mean_axis(attend_tokens(features), 0);
    }

    // [latent] -> [1,1,D,D,D] occupancy probabilities.
    TensorT<T> decode(const TensorT<T>& latent) {
        if (latent.numel() != cfg_.latent_dim)
            throw DimensionError("decode: expected latent of length " +
                                 std::to_string(cfg_.latent_dim) + ", got " +
                                 shape_str(latent.shape()));
        TensorT<T> x = reshape(latent, {1, cfg_.seed_channels(), 2, 2, 2});
        const int64_t up = cfg_.upsample_stages();
        for (size_t b = 1; b <= cfg_.decoder_channels.size(); ++b) {
            const std::string pfx = "dec.b" + std::to_string(b) + ".";
            const bool doubling = static_cast<int64_t>(b) <= up;
            TensorT<T> y;
            TensorT<T> skip_in;
            if (doubling) {
                y = conv_transpose3d(x, params_.get(pfx + "tconv.w"),
                                     params_.get(pfx + "tconv.b"), 2, 1, 1);
                skip_in = upsample_nearest3d(x);
            } else {
                y = conv_transpose3d(x, params_.get(pfx + "tconv.w"),
                                     params_.get(pfx + "tconv.b"), 1, 1, 0);
                skip_in = x;
            }
            TensorT<T> skip =
                conv3d(skip_in, params_.get(pfx + "skip.w"), params_.get(pfx + "skip.b"), 1, 0);
            x = leaky_relu(add(y, skip));
        }
        TensorT<T> logits = conv3d(x, params_.get("dec.out.w"), params_.get("dec.out.b"), 1, 0);
        return sigmoid(logits);
    }

    // [1,1,D,D,D] -> [1,1,D,D,D]. U-Net refiner; size_chain, when given,
    // receives the spatial extent after every stage.
    TensorT<T> refine(const TensorT<T>& volume, bool train_mode,
                      std::vector<int64_t>* size_chain = nullptr) {
        const int64_t D = cfg_.voxel_dim;
        if (volume.rank() != 5 || volume.dim(2) != D || volume.dim(3) != D || volume.dim(4) != D)
            throw DimensionError("refine: expected [1,1," + std::to_string(D) + "^3], got " +
                                 shape_str(volume.shape()));
        auto note = [&](const TensorT<T>& t) {
            if (size_chain) size_chain->push_back(t.shape().back());
        };
        note(volume);
        const size_t stages = cfg_.refiner_channels.size();
        std::vector<TensorT<T>> enc_outputs;
        TensorT<T> x = volume;
        for (size_t i = 1; i <= stages; ++i) {
            const std::string pfx = "ref.enc" + std::to_string(i) + ".";
            x = conv3d(x, params_.get(pfx + "conv.w"), TensorT<T>{}, 1, 2);
            note(x);
            x = batchnorm(x, params_.get(pfx + "bn.gamma"), params_.get(pfx + "bn.beta"),
                          params_.get(pfx + "bn.rmean"), params_.get(pfx + "bn.rvar"),
                          train_mode);
            x = maxpool3d(leaky_relu(x));
            note(x);
            enc_outputs.push_back(x);
        }
        for (size_t i = 1; i <= stages; ++i) {
            const std::string pfx = "ref.dec" + std::to_string(i) + ".";
            x = conv_transpose3d(x, params_.get(pfx + "tconv.w"), TensorT<T>{}, 2, 1, 0);
            note(x);
            x = batchnorm(x, params_.get(pfx + "bn.gamma"), params_.get(pfx + "bn.beta"),
                          params_.get(pfx + "bn.rmean"), params_.get(pfx + "bn.rvar"),
                          train_mode);
            x = relu(x);
            if (i < stages) x = concat<T>({x, enc_outputs[stages - 1 - i]}, 1);
        }
        // the decoder's prediction rides along into the last convolution
        x = concat<T>({x, volume}, 1);
        TensorT<T> logits = conv3d(x, params_.get("ref.out.w"), params_.get("ref.out.b"), 1, 0);
        return sigmoid(logits);
    }

    // Full pipeline over an unordered view set.
    std::pair<TensorT<T>, TensorT<T>> forward(const std::vector<TensorT<T>>& views,
                                              bool train_mode = false) {
        if (views.empty()) throw DimensionError("forward: empty view set");
        std::vector<TensorT<T>> feats;
        feats.reserve(views.size());
        for (const auto& v : views) feats.push_back(encode(v));
        TensorT<T> fused = attend(stack_rows(feats));
        TensorT<T> v_decoder = decode(fused);
        TensorT<T> v_refined = refine(v_decoder, train_mode);
        return {v_decoder, v_refined};
    }

    int64_t parameter_count(Partition p) const { return params_.count(p, true); }
    int64_t parameter_count() const {
        return parameter_count(Partition::theta_base) + parameter_count(Partition::phi_att) +
               parameter_count(Partition::phi_ref);
    }

private:
    ModelConfig cfg_;
    RegistryT<T> params_;
};

using Model = ModelT<float>;
using Registry = RegistryT<float>;

}  // namespace refine3d
