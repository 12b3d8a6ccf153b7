#include "test_util.hpp"

#include "fedgin/data.hpp"

#include <doctest.h>

#include <fstream>
#include <iterator>
#include <map>
#include <set>

using namespace fedgin;
namespace fs = std::filesystem;

namespace {

std::vector<char> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("phantoms are deterministic and respect the organ invariant") {
  const Phantom a = generate_phantom(42, 32, 32, 12), b = generate_phantom(42, 32, 32, 12);
  CHECK(a.labels == b.labels);
  CHECK(a.labels != generate_phantom(43, 32, 32, 12).labels);
  double lo = 1.0, hi = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Phantom p = generate_phantom(s * 7919 + 1, 32, 32, 12);
    const double f = p.organ_fraction();
    if (s < 10) {
      CHECK(f > 0.0);
      CHECK(f <= 0.25);
    }
    lo = std::min(lo, f);
    hi = std::max(hi, f);
  }
  INFO("organ fraction range [" << lo << ", " << hi << "]");
  CHECK(lo <= 0.02);
  CHECK(hi >= 0.15);
}

TEST_CASE("rendering separates geometry from appearance") {
  const Phantom p = generate_phantom(5, 32, 32, 8);
  const auto a = render_modality(p, Modality::A, 11), b = render_modality(p, Modality::B, 12);
  REQUIRE(a.size() == 8);
  for (std::size_t s = 0; s < a.size(); ++s) {
    CHECK(bitwise_equal(a[s].mask, b[s].mask));
    CHECK_FALSE(bitwise_equal(a[s].image, b[s].image));
    for (float v : a[s].image.data()) CHECK((v >= 0.0f && v <= 1.0f));
  }
  // noiseless modality A is the lookup table itself
  const auto clean = render_modality(p, Modality::A, 11, RenderOptions{false});
  for (int s = 0; s < 8; ++s)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const float v = clean[s].image.data()[static_cast<std::size_t>(y * 32 + x)];
        CHECK(v == modality_intensity(Modality::A, p.label(s, y, x)));
      }
}

TEST_CASE("domain gap probe") {
  // organ minus background contrast per modality, averaged over 20 volumes
  double ca = 0, cb = 0;
  for (int v = 0; v < 20; ++v) {
    const Phantom p = generate_phantom(1000 + v, 32, 32, 8);
    const auto a = render_modality(p, Modality::A, 2000 + v), b = render_modality(p, Modality::B, 3000 + v);
    double oa = 0, ob = 0, ba = 0, bb = 0;
    long no = 0, nb = 0;
    for (int s = 0; s < 8; ++s)
      for (int i = 0; i < 32 * 32; ++i) {
        const auto lab = p.labels[static_cast<std::size_t>(s * 1024 + i)];
        if (lab == tissue::kOrgan) {
          oa += a[s].image.data()[i];
          ob += b[s].image.data()[i];
          ++no;
        } else if (lab == tissue::kBody) {
          ba += a[s].image.data()[i];
          bb += b[s].image.data()[i];
          ++nb;
        }
      }
    ca += oa / no - ba / nb;
    cb += ob / no - bb / nb;
  }
  ca /= 20;
  cb /= 20;
  INFO("contrast A " << ca << " B " << cb);
  CHECK((ca * cb < 0 || std::abs(ca - cb) >= 0.2));
}

TEST_CASE("slice files round trip and reject corruption") {
  RngStream r(1);
  Tensor img = testutil::random_tensor({1, 4, 6}, r, 0, 1, false);
  const auto bytes = encode_slice(SliceKind::Image, img);
  CHECK(bytes.size() == kSliceHeaderSize + 24 * 4);
  CHECK(bitwise_equal(decode_slice(bytes, SliceKind::Image), img));
  CHECK_THROWS(decode_slice(bytes, SliceKind::Mask));
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS(decode_slice(bad, SliceKind::Image));
  bad = bytes;
  bad.pop_back();
  CHECK_THROWS(decode_slice(bad, SliceKind::Image));
}

TEST_CASE("dataset bookkeeping, loading and regeneration") {
  const fs::path dir = testutil::temp_dir("data");
  DatasetConfig c;
  c.height = c.width = 16;
  c.slices = 4;
  c.seed = 3;
  c.splits = {{Modality::B, Split::Train, 10, std::nullopt},
              {Modality::B, Split::Val, 5, std::nullopt},
              {Modality::B, Split::Test, 5, std::nullopt},
              {Modality::A, Split::Train, 2, std::nullopt}};
  const DatasetManifest m = build_dataset(c, dir);
  CHECK(m.select(Modality::B, Split::Train).size() == 10);
  CHECK(m.select(Modality::B, Split::Val).size() == 5);
  CHECK(m.select(Modality::B, Split::Test).size() == 5);
  std::set<std::string> ids;
  for (const auto& v : m.volumes) CHECK(ids.insert(v.volume_id).second);
  CHECK(ids.size() == 22);

  const DatasetManifest loaded = load_manifest(dir / "manifest.json");
  CHECK(loaded.volumes.size() == 22);
  const auto vols = load_volumes(loaded, Modality::B, Split::Test);
  REQUIRE(vols.size() == 5);
  CHECK(vols[0].slices.size() == 4);
  CHECK(vols[0].slices[0].image.shape() == Shape{1, 16, 16});
  CHECK(load_volumes(loaded, Modality::B, Split::Train, 3).size() == 3);

  // regenerate one volume elsewhere and compare bytes
  const fs::path dir2 = testutil::temp_dir("data_regen");
  const auto& rec = loaded.volumes[7];
  regenerate_volume(loaded, rec, dir2);
  for (std::size_t s = 0; s < rec.image_files.size(); ++s) {
    CHECK(slurp(dir / rec.image_files[s]) == slurp(dir2 / rec.image_files[s]));
    CHECK(slurp(dir / rec.mask_files[s]) == slurp(dir2 / rec.mask_files[s]));
  }

  DatasetConfig overlap = c;
  overlap.splits = {{Modality::A, Split::Train, 4, 0}, {Modality::A, Split::Test, 2, 3}};
  CHECK_THROWS(build_dataset(overlap, testutil::temp_dir("data_bad")));
  DatasetConfig twice = c;
  twice.splits = {{Modality::A, Split::Train, 1, std::nullopt}, {Modality::A, Split::Train, 1, std::nullopt}};
  CHECK_THROWS(build_dataset(twice, testutil::temp_dir("data_bad2")));
  CHECK_THROWS(load_manifest(dir / "missing.json"));
}

}  // TEST_SUITE
