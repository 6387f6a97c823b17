#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nestnet/encoder.hpp"
#include "nestnet/quant.hpp"
#include "nestnet/rng.hpp"
#include "nestnet/tensor.hpp"

namespace nestnet {

/// The architecture grid. Maximum entries define the largest network,
/// which is also the stored one.
struct Grid {
  std::vector<std::size_t> depths;
  std::vector<std::size_t> widths;
  std::vector<int> precisions;  // bit-widths; 32 = unquantized
};

void validate_grid(const Grid& grid, const EncoderConfig& cfg);

// Full Cartesian product, sorted largest-first.
std::vector<SubnetSpec> enumerate_grid(const Grid& grid);
SubnetSpec largest_spec(const Grid& grid);
SubnetSpec smallest_spec(const Grid& grid);
bool grid_contains(const Grid& grid, const SubnetSpec& spec);

struct TrainingMeta {
  std::uint64_t steps = 0;
  std::uint64_t seed = 0;
};

/// Float master weights of the largest network plus one learned scale per
/// (quantizable tensor, grid precision). Every sub-network is a view of
/// these tensors.
struct SupernetModel {
  EncoderConfig config;
  Grid grid;
  MaskPolicy policy = MaskPolicy::leading;
  TrainingMeta meta;
  std::map<std::string, Tensor> weights;
  std::map<std::string, double> scales;  // keyed by scale_key(name, bits)

  static SupernetModel init(const EncoderConfig& cfg, const Grid& grid,
                            MaskPolicy policy, Rng& init_rng);

  // Masked + quantized forward under `spec`; rows are log-distributions.
  Tensor frame_log_posteriors(const Tensor& feats, const SubnetSpec& spec) const;

  void check_spec(const SubnetSpec& spec) const;
};

/// A standalone sub-network: tensors physically sliced to the spec, with
/// quantizable tensors exported as integer codes.
struct ExtractedModel {
  EncoderConfig config;  // sliced to spec.depth / spec.width
  SubnetSpec spec;       // the grid point this was carved from
  MaskPolicy policy = MaskPolicy::leading;
  std::map<std::string, std::vector<std::size_t>> kept;  // per FFN module
  std::map<std::string, Tensor> floats;
  std::map<std::string, IntTensor> ints;

  // Dequantized view used for forwarding; identical to what the codes store.
  std::map<std::string, Tensor> dense() const;
  Tensor frame_log_posteriors(const Tensor& feats) const;
};

ExtractedModel extract(const SupernetModel& model, const SubnetSpec& spec);

// (quantizable, fixed) parameter counts after depth/width slicing.
std::pair<std::size_t, std::size_t> param_count(const EncoderConfig& cfg,
                                                const SubnetSpec& spec);

// Stored-bits ratio of the 32-bit base network over the compressed one;
// non-quantizable parameters stay at full precision.
double compression_ratio(const EncoderConfig& cfg, const SubnetSpec& base,
                         const SubnetSpec& spec);
double ratio_from_counts(double n_base_total, double n_quantizable,
                         double n_fixed, int bits);

inline constexpr char kModelMagic[4] = {'A', 'I', 'O', '1'};
inline constexpr std::uint32_t kModelVersion = 1;

void save_supernet(const std::string& path, const SupernetModel& model);
SupernetModel load_supernet(const std::string& path);

void save_extracted(const std::string& path, const ExtractedModel& model);
ExtractedModel load_extracted(const std::string& path);

// "supernet", "extracted" or "checkpoint"; peeks at the header only.
std::string model_file_kind(const std::string& path);

}  // namespace nestnet
