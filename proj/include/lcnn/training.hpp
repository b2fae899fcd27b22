#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcnn/arch.hpp"
#include "lcnn/data.hpp"
#include "lcnn/random.hpp"

namespace lcnn {

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 64;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::uint64_t seed = 1;
    std::size_t eval_every = 1;

    void validate() const {
        if (batch_size == 0) throw ConfigError("batch size must be >= 1");
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
            throw ConfigError("learning rate must be finite and non-negative");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
        if (eval_every == 0) throw ConfigError("eval_every must be >= 1");
    }
};

enum class Split { Train, Test };

inline std::string_view split_name(Split s) noexcept { return s == Split::Train ? "train" : "test"; }

struct MetricsRecord {
    std::size_t epoch = 0;
    Split split = Split::Test;
    double loss = 0.0;
    double accuracy = 0.0;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Classical momentum: v <- momentum*v - lr*g; w <- w + v.
template <Real T>
void sgd_step(std::vector<NamedTensor<T>>& params, const Gradients<T>& grads, Gradients<T>& velocity,
              const TrainConfig& config) {
    if (grads.size() != params.size() || velocity.size() != params.size())
        throw ShapeError("sgd_step: " + std::to_string(params.size()) + " params, " + std::to_string(grads.size()) +
                         " grads, " + std::to_string(velocity.size()) + " velocities");
    for (std::size_t i = 0; i < params.size(); ++i) {
        require_same_shape(params[i].value.shape(), grads[i].shape(), "sgd_step grad");
        require_same_shape(params[i].value.shape(), velocity[i].shape(), "sgd_step velocity");
        for (std::size_t k = 0; k < grads[i].size(); ++k)
            if (!std::isfinite(grads[i][k]))
                throw TrainingError("non-finite gradient in parameter \"" + params[i].name + "\" at element " +
                                    std::to_string(k));
    }
    const T lr = static_cast<T>(config.learning_rate);
    const T mu = static_cast<T>(config.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
        T* w = params[i].value.raw();
        T* v = velocity[i].raw();
        const T* g = grads[i].raw();
        for (std::size_t k = 0; k < params[i].value.size(); ++k) {
            v[k] = mu * v[k] - lr * g[k];
            w[k] += v[k];
        }
    }
}

/// Index of the largest logit in each row; ties go to the lowest class.
template <Real T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
    const auto n = logits.dim(0), k = logits.dim(1);
    std::vector<std::size_t> out(n);
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (logits[r * k + j] > logits[r * k + best]) best = j;
        out[r] = best;
    }
    return out;
}

/// Which streams of a pair set a network consumes.
template <Real T>
StreamSelect stream_select_for(const Network<T>& net, StreamSelect single_stream = StreamSelect::Gray) {
    return net.streams() == 1 ? single_stream : StreamSelect::Both;
}

/// Loss and accuracy with dropout disabled. Does not modify the network.
template <Real T>
MetricsRecord evaluate(const Network<T>& net, const StreamPairSet& data, StreamSelect which, Split split,
                       std::size_t batch_size = 256, std::size_t epoch = 0) {
    MetricsRecord rec{epoch, split, 0.0, 0.0};
    if (data.size() == 0) return rec;
    if (data.side != net.spec().input_side)
        throw ConfigError("evaluate: data side " + std::to_string(data.side) + " does not match network input side " +
                          std::to_string(net.spec().input_side));
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < idx.size(); start += batch_size) {
        const auto count = std::min(batch_size, idx.size() - start);
        std::span<const std::size_t> batch(idx.data() + start, count);
        auto inputs = data.gather<T>(batch, which);
        auto fr = forward(net, inputs, false);
        std::vector<std::uint8_t> labels(count);
        for (std::size_t k = 0; k < count; ++k) labels[k] = data.labels[batch[k]];
        loss_sum += softmax_xent(fr.logits, labels).loss * static_cast<double>(count);
        const auto pred = argmax_rows(fr.logits);
        for (std::size_t k = 0; k < count; ++k) correct += pred[k] == labels[k];
    }
    rec.loss = loss_sum / static_cast<double>(data.size());
    rec.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    return rec;
}

using RecordCallback = std::function<void(const MetricsRecord&)>;

/// Mini-batch SGD. Each epoch visits a seed-derived permutation of the
/// training set. Every `eval_every` epochs (and after the last one) it appends
/// a train record, the running mean of the epoch's mini-batch loss and
/// accuracy with dropout active, and a test record from evaluate().
template <Real T>
std::vector<MetricsRecord> train(Network<T>& net, const StreamPairSet& train_data, const StreamPairSet& test_data,
                                 StreamSelect which, const TrainConfig& config, const RecordCallback& on_record = {}) {
    config.validate();
    if (train_data.size() == 0) throw ConfigError("train: training set is empty");
    if (train_data.side != net.spec().input_side)
        throw ConfigError("train: data side " + std::to_string(train_data.side) +
                          " does not match network input side " + std::to_string(net.spec().input_side));

    std::vector<MetricsRecord> records;
    Gradients<T> velocity = net.zero_gradients();
    std::vector<std::size_t> order(train_data.size());
    std::uint64_t step = 0;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        CounterRng(derive_seed({config.seed, 0x5AFF1E, epoch})).shuffle(std::span<std::size_t>(order));

        double loss_sum = 0.0;
        std::size_t correct = 0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
            const auto count = std::min(config.batch_size, order.size() - start);
            std::span<const std::size_t> batch(order.data() + start, count);
            auto inputs = train_data.gather<T>(batch, which);
            std::vector<std::uint8_t> labels(count);
            for (std::size_t k = 0; k < count; ++k) labels[k] = train_data.labels[batch[k]];

            auto fr = forward(net, inputs, true, step++);
            auto loss = softmax_xent(fr.logits, labels);
            if (!std::isfinite(loss.loss))
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_index));
            loss_sum += loss.loss * static_cast<double>(count);
            const auto pred = argmax_rows(fr.logits);
            for (std::size_t k = 0; k < count; ++k) correct += pred[k] == labels[k];

            auto grads = backward(net, fr.cache, loss.grad);
            sgd_step(net.mutable_params(), grads, velocity, config);
        }

        if (epoch % config.eval_every == 0 || epoch == config.epochs) {
            MetricsRecord tr{epoch, Split::Train, loss_sum / static_cast<double>(order.size()),
                             static_cast<double>(correct) / static_cast<double>(order.size())};
            records.push_back(tr);
            if (on_record) on_record(tr);
            if (test_data.size() > 0) {
                records.push_back(evaluate(net, test_data, which, Split::Test, 256, epoch));
                if (on_record) on_record(records.back());
            }
        }
    }
    return records;
}

struct MetricsHeader {
    std::string arch;
    std::string mode;
    std::uint64_t seed = 0;
    double learning_rate = 0;
    std::size_t batch = 0;
    double momentum = 0;
};

inline std::string format_fixed(double v, int decimals = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

/// `# arch=... mode=... seed=... lr=... batch=... momentum=...`, the column
/// line, then one row per record with 6 decimals.
inline void write_metrics_csv(std::ostream& os, const MetricsHeader& h, std::span<const MetricsRecord> records) {
    os << "# arch=" << h.arch << " mode=" << h.mode << " seed=" << h.seed << " lr=" << format_fixed(h.learning_rate)
       << " batch=" << h.batch << " momentum=" << format_fixed(h.momentum) << "\n";
    os << "epoch,split,loss,accuracy\n";
    for (const auto& r : records)
        os << r.epoch << ',' << split_name(r.split) << ',' << format_fixed(r.loss) << ',' << format_fixed(r.accuracy)
           << "\n";
}

}  // namespace lcnn
