#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "subcnn/data.hpp"
#include "subcnn/detnet.hpp"
#include "subcnn/pyramid.hpp"
#include "subcnn/rpn.hpp"
#include "subcnn/subcategory.hpp"

namespace subcnn {

/// One training example held in memory. Non-ignored annotations must carry a
/// class and a subcategory consistent with the table before training.
struct TrainSample {
  Tensor image;                         ///< (H, W, C) in [0, 1]
  std::vector<Annotation> annotations;
};

/// SGD schedule plus the mini-batch recipes for both stages. Stage 1 draws
/// one image per iteration; stage 2 draws `det_images`.
struct TrainConfig {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int iterations = 100;
  uint64_t seed = 0;
  double lambda = 1.0;   ///< stage-1 box-term weight
  double lambda1 = 1.0;  ///< stage-2 class-term weight
  double lambda2 = 1.0;  ///< stage-2 box-term weight
  int rpn_rois = 128;
  double rpn_positive_fraction = 0.5;
  double rpn_iou_pos = 0.7;
  double rpn_iou_neg = 0.3;
  int det_images = 2;
  int det_rois = 64;  ///< per image
  double det_positive_fraction = 0.25;
  double det_iou_pos = 0.5;
  int log_every = 10;
  void validate() const;
};

/// First-stage network: the shared trunk plus its proposal heads.
template <typename T>
struct RpnModelT {
  BackboneT<T> backbone;
  RpnParamsT<T> params;
};
using RpnModel = RpnModelT<float>;

/// Fan-in-scaled Gaussian weights (sigma = sqrt(2/fan_in)) and zero biases,
/// except the subcategory-conv foreground biases, which start at -log(K) so
/// the initial heat maps put roughly half their mass on background.
template <typename T>
RpnModelT<T> init_rpn_model(int in_channels, int c1, int c2, int filter_size,
                            const SubcategoryTable& table, uint64_t seed);

/// Same initialization convention for the second-stage heads (all biases
/// zero here).
template <typename T>
DetParamsT<T> init_det_params(int channels, int grid, int hidden,
                              const SubcategoryTable& table, uint64_t seed);

/// Fills each non-ignored annotation's subcategory from the orientation-bin
/// convention of the table. Ignored annotations are left untouched.
void assign_subcategories(std::vector<Annotation>& annotations,
                          const SubcategoryTable& table);

/// One loss-log row: the optimized total and its components. Stage 1 has no
/// separate class term (cls stays 0); its loc term includes the box weight.
struct LossRow {
  int iteration = 0;
  double total = 0, subcls = 0, cls = 0, loc = 0;
};
std::string loss_log_to_csv(const std::vector<LossRow>& rows);
std::vector<LossRow> loss_log_from_csv(const std::string& text);

/// Plain SGD with momentum and L2 weight decay, one velocity per tensor:
/// v = mu*v - lr*(g + wd*p); p += v.
template <typename T>
class SgdT {
 public:
  SgdT(std::vector<TensorT<T>*> params, const TrainConfig& cfg);
  /// Grads run parallel to the parameter list given at construction.
  void step(const std::vector<const TensorT<T>*>& grads);

 private:
  std::vector<TensorT<T>*> params_;
  std::vector<TensorT<T>> velocity_;
  T lr_, mu_, wd_;
};
using Sgd = SgdT<float>;

/// Training-mode feature tape: computed levels run the backbone on the
/// rescaled image; extrapolated levels resize their source level's map.
/// Only levels flagged needed get a ref (-1 elsewhere).
template <typename T>
std::vector<int> tape_pyramid_features(GraphT<T>& g, const TensorT<T>& image,
                                       const BackboneRefs& bb,
                                       const std::vector<LevelGeom>& geoms,
                                       const std::vector<bool>& needed);

/// Everything one first-stage iteration derives from (model, image, truth).
/// Exposed so single-step invariants can be checked against an independently
/// built copy of the same graph.
template <typename T>
struct RpnStepT {
  std::vector<Roi> batch;
  BackboneRefs backbone;
  RpnRefs heads;
  RpnForwardT<T> fwd;
};

/// Mines the RoI batch with the current heat maps and builds the training
/// tape for one image. The batch can be empty only if mining found nothing.
template <typename T>
RpnStepT<T> rpn_step_graph(GraphT<T>& g, const RpnModelT<T>& model,
                           const ScaleSet& scales, const SubcategoryTable& table,
                           const TensorT<T>& image,
                           const std::vector<Annotation>& gts, const TrainConfig& cfg);

/// Labels second-stage candidates for one image: the proposals plus the
/// ground-truth boxes themselves, re-homed to the pyramid level matching the
/// pooling grid; candidates that cannot pool there are dropped. A candidate
/// is positive at IoU >= iou_pos against its best non-ignored ground truth
/// (copying class, subcategory, and the encoded box target) and negative
/// otherwise, except that candidates overlapping an ignored region at
/// iou_pos or above are excluded.
std::vector<Roi> label_det_candidates(const std::vector<Roi>& proposals,
                                      const std::vector<Annotation>& gts,
                                      const std::vector<LevelGeom>& geoms, int stride,
                                      int grid, const SubcategoryTable& table,
                                      double iou_pos);

/// Samples one image's batch: round(rois * positive_fraction) positives then
/// negatives, shuffled, cycling a short pool; an empty pool is covered by
/// the other one with a warning. Empty input yields an empty batch.
std::vector<Roi> sample_det_batch(const std::vector<Roi>& pool, int rois,
                                  double positive_fraction, Rng& rng);

template <typename T>
struct RpnTrainResultT {
  RpnModelT<T> model;
  std::vector<LossRow> log;
  bool aborted = false;  ///< diverged; model is the last stable state
  int iterations_done = 0;
};
using RpnTrainResult = RpnTrainResultT<float>;

/// First-stage SGD: one uniformly drawn image per iteration, hard-mined RoI
/// batch, backprop through heads and trunk. Deterministic given the seed.
/// A non-finite value mid-iteration aborts with the last stable parameters
/// (at iteration 0 it is an error instead).
template <typename T>
RpnTrainResultT<T> train_rpn(const std::vector<TrainSample>& dataset,
                             const ScaleSet& scales, const SubcategoryTable& table,
                             const RpnModelT<T>& init, const TrainConfig& cfg);

template <typename T>
struct DetTrainResultT {
  DetParamsT<T> params;
  std::vector<LossRow> log;
  bool aborted = false;
  int iterations_done = 0;
};
using DetTrainResult = DetTrainResultT<float>;

/// Second-stage SGD over the detection heads on features from the frozen
/// trunk: det_images uniformly drawn images per iteration, det_rois sampled
/// candidates each, loss averaged over the images. proposals[i] belongs to
/// dataset[i]. Determinism and divergence handling as in train_rpn.
template <typename T>
DetTrainResultT<T> train_detector(const std::vector<TrainSample>& dataset,
                                  const std::vector<std::vector<Roi>>& proposals,
                                  const BackboneT<T>& backbone, const ScaleSet& scales,
                                  const SubcategoryTable& table,
                                  const DetParamsT<T>& init, const TrainConfig& cfg);

/// Checkpoints: a directory holding one binary tensor file per parameter
/// plus a JSON manifest with the architecture fields.
void save_rpn_model(const std::string& dir, const RpnModel& model);
RpnModel load_rpn_model(const std::string& dir);
void save_det_params(const std::string& dir, const DetParams& params);
DetParams load_det_params(const std::string& dir);

}  // namespace subcnn
