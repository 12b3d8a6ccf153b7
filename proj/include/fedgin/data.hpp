#pragma once

#include "fedgin/rng.hpp"
#include "fedgin/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fedgin {

enum class Modality { A, B };
enum class Split { Train, Val, Test };

std::string to_string(Modality m);
std::string to_string(Split s);
Modality parse_modality(const std::string& s);
Split parse_split(const std::string& s);

/// Tissue labels of the synthetic anatomy.
namespace tissue {
inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kBody = 1;
inline constexpr std::uint8_t kOrgan = 2;
inline constexpr std::uint8_t kCapsule = 3;  // thin wall around the organ, not part of the mask
inline constexpr std::uint8_t kFirstDistractor = 4;
inline constexpr int kMaxDistractors = 4;
inline constexpr int kLabelCount = kFirstDistractor + kMaxDistractors;
}  // namespace tissue

/// Stack of label maps. Ellipse centres and axes drift along low-frequency
/// curves in z so neighbouring slices look alike.
struct Phantom {
  std::string volume_id;
  std::uint64_t seed = 0;
  int height = 0;
  int width = 0;
  int slices = 0;
  int distractors = 0;
  std::vector<std::uint8_t> labels;  // [slices][height][width]

  [[nodiscard]] std::uint8_t label(int s, int y, int x) const {
    return labels[(static_cast<std::size_t>(s) * height + y) * width + x];
  }
  [[nodiscard]] double organ_fraction() const;
  [[nodiscard]] int slices_with_organ() const;
};

Phantom generate_phantom(std::uint64_t seed, int height, int width, int slices);

struct SliceSample {
  Tensor image;  // [1,H,W] in [0,1]
  Tensor mask;   // [1,H,W] in {0,1}
  std::string volume_id;
  int slice_index = 0;
  Modality modality = Modality::A;
};

struct RenderOptions {
  bool noise = true;
};

/// Per-label intensity used by each modality before bias, gamma and noise.
float modality_intensity(Modality modality, std::uint8_t label);

/// Modality A: lookup + N(0, 0.02). Modality B: partially inverted lookup,
/// smooth polynomial bias field in [0.7, 1.3], per-volume gamma in
/// [0.7, 1.4], N(0, 0.03). Images clamp to [0,1]; masks copy the organ label.
std::vector<SliceSample> render_modality(const Phantom& phantom, Modality modality, std::uint64_t seed,
                                         const RenderOptions& options = {});

// --- slice files ------------------------------------------------------------

enum class SliceKind : std::uint8_t { Image = 0, Mask = 1 };

inline constexpr std::size_t kSliceHeaderSize = 16;
inline constexpr std::uint8_t kSliceFormatVersion = 1;

std::vector<std::uint8_t> encode_slice(SliceKind kind, const Tensor& plane);
Tensor decode_slice(std::span<const std::uint8_t> bytes, SliceKind expected_kind);
void write_slice_file(const std::filesystem::path& path, SliceKind kind, const Tensor& plane);
Tensor read_slice_file(const std::filesystem::path& path, SliceKind expected_kind);

// --- dataset ----------------------------------------------------------------

struct SplitRequest {
  Modality modality = Modality::A;
  Split split = Split::Train;
  int count = 0;
  /// Phantom index of the first volume; consecutive by default.
  std::optional<int> first_index;
};

struct DatasetConfig {
  int height = 64;
  int width = 64;
  int slices = 16;
  std::uint64_t seed = 0;
  std::string organ = "organ";
  std::vector<SplitRequest> splits;

  /// 20 train, 5 val, 10 test volumes per modality.
  static DatasetConfig desk_default();
};

struct VolumeRecord {
  std::string volume_id;
  Modality modality = Modality::A;
  Split split = Split::Train;
  int phantom_index = 0;
  int slices = 0;
  std::uint64_t phantom_seed = 0;
  std::uint64_t render_seed = 0;
  std::vector<std::string> image_files;  // relative to the manifest directory
  std::vector<std::string> mask_files;
};

inline constexpr int kManifestVersion = 1;

struct DatasetManifest {
  int version = kManifestVersion;
  DatasetConfig config;
  std::vector<VolumeRecord> volumes;
  std::filesystem::path root;  // directory holding manifest.json (not serialized)

  [[nodiscard]] std::vector<const VolumeRecord*> select(Modality m, Split s) const;
};

/// Writes slice files and manifest.json under `out_dir`.
DatasetManifest build_dataset(const DatasetConfig& config, const std::filesystem::path& out_dir);
/// Regenerates one volume's files from its recorded seeds.
void regenerate_volume(const DatasetManifest& manifest, const VolumeRecord& record,
                       const std::filesystem::path& out_dir);

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

struct Volume {
  std::string volume_id;
  Modality modality = Modality::A;
  Split split = Split::Train;
  std::vector<SliceSample> slices;  // ordered by slice index
};

Volume load_volume(const DatasetManifest& manifest, const VolumeRecord& record);
std::vector<Volume> load_volumes(const DatasetManifest& manifest, Modality m, Split s,
                                 std::optional<int> limit = std::nullopt);

}  // namespace fedgin
