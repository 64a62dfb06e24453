#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "twin/attention.hpp"
#include "twin/datagen.hpp"
#include "twin/features.hpp"
#include "twin/numerics.hpp"
#include "twin/retrieval.hpp"

// Desk-scale end-to-end CTR training: two-stage behavior modeling feeding a
// small feed-forward predictor, analytic gradients checked against finite
// differences, AdaGrad on embeddings and Adam on dense weights, AUC/GAUC
// evaluation.
//
// The first-stage selection is a hard, non-differentiated choice; gradients
// flow only through the attention pooling over the selected finalists.

namespace twin::train {

struct PredictorConfig {
    Index hidden1 = 64;
    Index hidden2 = 32;
};

struct Mlp {
    Matrix w1;  // input x hidden1
    Vector b1;
    Matrix w2;  // hidden1 x hidden2
    Vector b2;
    Vector w3;  // hidden2
    double b3 = 0.0;
};

struct ModelParams {
    feature::EmbeddingSet tables;
    attention::TwinParams twin;
    attention::DenseMhtaParams raw;  // populated for the unsplit variant
    Mlp mlp;
};

struct TrainConfig {
    attention::AttentionConfig attention;
    PredictorConfig predictor;
    retrieval::GsuKind gsu = retrieval::GsuKind::kTwinCp;
    Index finalists = 100;
    Index gsu_input_length = 0;  // 0 = full history, else the most recent n
    bool use_short_term = true;  // mean of the 50 most recent inherent rows
    Index short_term_count = 50;
    bool use_cross_bias = true;  // false: drop cross features from attention
    bool raw_mhta = false;       // true: unsplit attention in both stages
    Index batch_size = 256;
    Index steps = 300;
    double test_fraction = 0.25;  // per-user tail of samples held out
    double adagrad_lr = 0.05;
    double adagrad_eps = 1e-10;
    double adam_lr = 5.0e-6;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double init_scale = 0.1;      // embedding init magnitude
    double init_topic_mix = 0.5;  // topical structure of the initial tables
    Index eval_every = 0;         // 0 = final evaluation only
    Index workers = 0;            // 0 = read TWIN_WORKERS, else as given
    std::uint64_t seed = 1;

    void validate() const;
};

struct Batch {
    const datagen::SyntheticLog* log = nullptr;
    std::vector<Index> sample_indices;
};

// Predicted click probabilities, one per sample, in batch order.
Vector forward(const Batch& batch, const ModelParams& params,
               const datagen::World& world, const TrainConfig& config,
               const retrieval::PretrainedEmbeddings* pretrained);

// Mean negative log-likelihood; predictions at 0 or 1 are clamped at 1e-12
// and counted.
double loss(std::span<const double> predicted, std::span<const int> labels,
            Index* clamp_count = nullptr);

struct HeadGrads {
    Matrix query_proj;
    Matrix inherent_proj;
    std::vector<Vector> cross_weights;
    Vector cross_bias;
    Matrix value_proj;
};

struct RawHeadGrads {
    Matrix key_proj;
    Matrix query_proj;
    Vector query_bias;
    Matrix value_proj;
};

struct MlpGrads {
    Matrix w1;
    Vector b1;
    Matrix w2;
    Vector b2;
    Vector w3;
    double b3 = 0.0;
};

// Sparse per-table gradients: only touched rows are stored.
struct TableGrads {
    std::unordered_map<Index, Vector> rows;
};

struct Gradients {
    std::vector<HeadGrads> heads;
    Matrix output_proj;
    std::vector<RawHeadGrads> raw_heads;
    Matrix raw_output_proj;
    MlpGrads mlp;
    std::vector<TableGrads> tables;  // schema slot order
    double loss_sum = 0.0;
    Index clamp_count = 0;
    Index samples = 0;
};

// Full analytic gradient of the mean batch loss for every parameter group.
Gradients backward(const Batch& batch, const ModelParams& params,
                   const datagen::World& world, const TrainConfig& config,
                   const retrieval::PretrainedEmbeddings* pretrained);

ModelParams init_model(const datagen::World& world, const TrainConfig& config);

struct MetricsRow {
    Index step = 0;
    double loss = 0.0;
    double auc = 0.0;
    double gauc = 0.0;
};

struct TrainResult {
    ModelParams params;
    std::vector<double> loss_trace;  // one entry per step
    std::vector<MetricsRow> metrics;
    Index clamp_warnings = 0;
    double final_auc = 0.0;
    double final_gauc = 0.0;
};

// Deterministic given the seed; throws std::runtime_error if the loss
// diverges to a non-finite value.
TrainResult train(const datagen::World& world,
                  const datagen::SyntheticLog& log, const TrainConfig& config);

// Rank-based (Mann-Whitney) AUC with tie halving. Returns 0.5 when one
// class is absent.
double auc(std::span<const double> scores, std::span<const int> labels);

struct GaucResult {
    double value = 0.0;
    Index users_counted = 0;
    Index users_skipped = 0;  // single-class users, excluded from the mean
};

// Sample-count weighted mean of per-user AUC over users with both classes.
GaucResult gauc(std::span<const std::uint32_t> user_ids,
                std::span<const double> scores, std::span<const int> labels);

// Appends "step,loss,auc,gauc" rows; writes the header if the file is new.
void append_metrics_csv(const std::string& path,
                        std::span<const MetricsRow> rows);

}  // namespace twin::train
