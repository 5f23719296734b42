#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "dmseg/data.hpp"
#include "dmseg/phantom.hpp"

using namespace dmseg;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("dmseg_test_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

std::vector<char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensor<float> ramp(Shape s, float scale = 1.0f) {
  Tensor<float> t(std::move(s));
  for (index_t i = 0; i < t.numel(); ++i) t[i] = scale * static_cast<float>(i) - 3.5f;
  return t;
}

}  // namespace

TEST(Nifti, RoundTripIsBitExact) {
  TempDir dir;
  const Spacing spacing{2.5, 0.75, 0.8125};
  for (const std::string name : {"a.nii", "a.nii.gz"}) {
    const auto img = make_nifti(ramp(Shape{3, 4, 5}, 0.37f), spacing, NiftiType::Float32);
    write_nifti(dir.file(name), img);
    const auto back = read_nifti(dir.file(name));
    EXPECT_EQ(back.dims, img.dims);
    EXPECT_EQ(back.spacing, spacing);
    EXPECT_EQ(back.type, NiftiType::Float32);
    EXPECT_EQ(back.payload, img.payload);
  }
  Tensor<double> ints(Shape{2, 2, 3});
  for (index_t i = 0; i < 12; ++i) ints[i] = double(i * 1000 - 6000);
  write_nifti(dir.file("i.nii"), make_nifti(ints, spacing, NiftiType::Int16));
  EXPECT_EQ(read_nifti(dir.file("i.nii")).to_tensor<double>().values(), ints.values());

  LabelVolume labels(Shape{1, 2, 3, 4});
  for (std::size_t i = 0; i < labels.data.size(); ++i) labels.data[i] = static_cast<std::int32_t>(i % 5);
  write_nifti(dir.file("l.nii.gz"), labels_to_nifti(labels, spacing));
  EXPECT_EQ(labels_from_nifti(read_nifti(dir.file("l.nii.gz"))), labels);
}

TEST(Nifti, ScalingIsApplied) {
  TempDir dir;
  auto img = make_nifti(Tensor<double>(Shape{1, 1, 2}, 3.0), Spacing{1, 1, 1}, NiftiType::Int16);
  img.slope = 2.0;
  img.inter = 1.0;
  write_nifti(dir.file("s.nii"), img);
  const auto back = read_nifti(dir.file("s.nii"));
  EXPECT_EQ(back.value(0), 7.0);
  EXPECT_EQ(back.to_tensor<float>()[1], 7.0f);
}

TEST(Nifti, FourDimensionalStack) {
  TempDir dir;
  const auto t = ramp(Shape{4, 2, 3, 2});
  write_nifti(dir.file("m.nii.gz"), make_nifti(t, Spacing{1, 1, 1}, NiftiType::Float32));
  const auto back = read_nifti(dir.file("m.nii.gz")).to_tensor<float>();
  EXPECT_EQ(back.shape(), (Shape{4, 2, 3, 2}));
  EXPECT_EQ(back.values(), t.values());
}

TEST(Nifti, MalformedFilesFailLoudly) {
  TempDir dir;
  write_nifti(dir.file("ok.nii"), make_nifti(ramp(Shape{2, 2, 2}), Spacing{1, 1, 1}, NiftiType::Float32));
  const auto good = read_bytes(dir.file("ok.nii"));

  auto bad_magic = good;
  bad_magic[345] = 'x';
  write_bytes(dir.file("magic.nii"), bad_magic);
  EXPECT_THROW(read_nifti(dir.file("magic.nii")), FormatError);

  auto pair = good;
  pair[345] = 'i';
  write_bytes(dir.file("pair.nii"), pair);
  EXPECT_THROW(read_nifti(dir.file("pair.nii")), UnsupportedFeature);

  auto float64 = good;
  float64[70] = 64;
  float64[72] = 64;
  write_bytes(dir.file("f64.nii"), float64);
  EXPECT_THROW(read_nifti(dir.file("f64.nii")), UnsupportedFeature);

  auto truncated = good;
  truncated.resize(good.size() - 3);
  write_bytes(dir.file("short.nii"), truncated);
  EXPECT_THROW(read_nifti(dir.file("short.nii")), FormatError);

  write_bytes(dir.file("tiny.nii"), std::vector<char>(100, 0));
  EXPECT_THROW(read_nifti(dir.file("tiny.nii")), FormatError);
  EXPECT_THROW(read_nifti(dir.file("missing.nii")), FormatError);
  EXPECT_THROW(make_nifti(Tensor<double>(Shape{1, 1, 1}, 1.5), Spacing{1, 1, 1}, NiftiType::UInt8), InvalidInput);
}

TEST(Normalize, Schemes) {
  const auto flat = intensity_normalize(Tensor<double>(Shape{2, 3, 3, 3}, 4.0), NormalizeScheme::zscore());
  for (double v : flat.values()) EXPECT_EQ(v, 0.0);

  Tensor<double> w(Shape{1, 1, 1, 4}, std::vector<double>{-5, 5, 10, 20});
  const auto win = intensity_normalize(w, NormalizeScheme::window(0, 10));
  EXPECT_EQ(win.values(), (std::vector<double>{0, 0.5, 1, 1}));
  EXPECT_THROW(intensity_normalize(w, NormalizeScheme::window(3, 3)), InvalidInput);
  EXPECT_EQ(intensity_normalize(w, NormalizeScheme::none()).values(), w.values());

  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(7.0, 3.0);
  Tensor<double> x(Shape{2, 6, 7, 8});
  for (auto& v : x.values()) v = n(rng);
  const auto z = intensity_normalize(x, NormalizeScheme::zscore());
  const index_t V = 6 * 7 * 8;
  for (index_t c = 0; c < 2; ++c) {
    double mean = 0, sq = 0;
    for (index_t i = 0; i < V; ++i) mean += z[c * V + i] / double(V);
    for (index_t i = 0; i < V; ++i) sq += (z[c * V + i] - mean) * (z[c * V + i] - mean) / double(V);
    EXPECT_LT(std::fabs(mean), 1e-6);
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
  }
}

TEST(RandomCrop, IdentityAndDeterminism) {
  const auto img = ramp(Shape{2, 4, 5, 6});
  LabelVolume lab(Shape{1, 4, 5, 6});
  for (std::size_t i = 0; i < lab.data.size(); ++i) lab.data[i] = static_cast<std::int32_t>(i % 3);
  Rng rng(3);
  const auto whole = random_crop(img, lab, Triple{4, 5, 6}, rng);
  EXPECT_EQ(whole.image.values(), img.values());
  EXPECT_EQ(whole.label, lab);
  EXPECT_EQ(whole.corner, (Triple{0, 0, 0}));

  Rng a(42), b(42);
  for (int i = 0; i < 20; ++i) {
    const auto ca = random_crop(img, lab, Triple{2, 3, 2}, a);
    const auto cb = random_crop(img, lab, Triple{2, 3, 2}, b);
    ASSERT_EQ(ca.corner, cb.corner);
    ASSERT_EQ(ca.image.values(), cb.image.values());
  }
  EXPECT_THROW(random_crop(img, lab, Triple{0, 1, 1}, a), InvalidInput);
  EXPECT_THROW(random_crop(img, LabelVolume(Shape{1, 4, 5, 5}), Triple{1, 1, 1}, a), InvalidInput);
}

TEST(RandomCrop, CornerIsUniform) {
  Tensor<float> img(Shape{1, 4, 1, 1});
  LabelVolume lab(Shape{1, 4, 1, 1});
  Rng rng(7);
  const int n = 10000;
  std::array<int, 3> hist{};
  for (int i = 0; i < n; ++i) {
    const auto c = random_crop(img, lab, Triple{2, 1, 1}, rng);
    ASSERT_GE(c.corner[0], 0);
    ASSERT_LE(c.corner[0], 2);
    ++hist[static_cast<std::size_t>(c.corner[0])];
  }
  const double expect = n / 3.0, sigma = std::sqrt(n * (1.0 / 3.0) * (2.0 / 3.0));
  for (int h : hist) EXPECT_LT(std::fabs(h - expect), 3 * sigma) << h;
}

TEST(RandomCrop, WindowMatchesSourceAndStaysInBounds) {
  // Each source voxel holds a distinct positive id, so any read outside the
  // volume or off the reported window shows up as a mismatch.
  const index_t C = 2, D = 6, H = 5, W = 7;
  Tensor<double> img(Shape{C, D, H, W});
  for (index_t i = 0; i < img.numel(); ++i) img[i] = double(i + 1);
  LabelVolume lab(Shape{1, D, H, W});
  for (std::size_t i = 0; i < lab.data.size(); ++i) lab.data[i] = static_cast<std::int32_t>(i + 1);
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const Triple size{3, 2, 4};
    const auto c = random_crop(img, lab, size, rng);
    for (index_t ch = 0; ch < C; ++ch)
      for (index_t d = 0; d < 3; ++d)
        for (index_t h = 0; h < 2; ++h)
          for (index_t w = 0; w < 4; ++w) {
            const index_t src = ((d + c.corner[0]) * H + h + c.corner[1]) * W + w + c.corner[2];
            ASSERT_EQ(c.image[((ch * 3 + d) * 2 + h) * 4 + w], img[ch * D * H * W + src]);
            if (ch == 0) ASSERT_EQ(c.label.data[static_cast<std::size_t>((d * 2 + h) * 4 + w)], src + 1);
          }
  }
}

TEST(RandomCrop, ShortAxesAreReflectPadded) {
  Tensor<double> img(Shape{1, 1, 1, 3}, std::vector<double>{1, 2, 3});
  LabelVolume lab(Shape{1, 1, 1, 3}, std::vector<std::int32_t>{0, 1, 2});
  Rng rng(1);
  const auto c = random_crop(img, lab, Triple{1, 1, 5}, rng);
  EXPECT_EQ(c.image.values(), (std::vector<double>{2, 1, 2, 3, 2}));
  EXPECT_EQ(c.label.data, (std::vector<std::int32_t>{1, 0, 1, 2, 1}));
  EXPECT_EQ(reflect_index(-1, 3), 1);
  EXPECT_EQ(reflect_index(3, 3), 1);
  EXPECT_EQ(reflect_index(5, 1), 0);
}

TEST(Split, CountsAndPartition) {
  std::vector<int> thirty(30), ten(10);
  std::iota(thirty.begin(), thirty.end(), 0);
  std::iota(ten.begin(), ten.end(), 0);
  const std::array<double, 3> fr{0.7, 0.1, 0.2};
  for (const auto* cases : {&thirty, &ten}) {
    const auto parts = split_dataset(*cases, fr, 5);
    std::multiset<int> all;
    for (const auto& p : parts) all.insert(p.begin(), p.end());
    EXPECT_EQ(all, std::multiset<int>(cases->begin(), cases->end()));
  }
  const auto p30 = split_dataset(thirty, fr, 5);
  EXPECT_EQ(p30[0].size(), 21u);
  EXPECT_EQ(p30[1].size(), 3u);
  EXPECT_EQ(p30[2].size(), 6u);
  const auto p10 = split_dataset(ten, fr, 5);
  EXPECT_EQ(p10[0].size(), 7u);
  EXPECT_EQ(p10[1].size(), 1u);
  EXPECT_EQ(p10[2].size(), 2u);

  // leftovers go train first: 11 cases at 70/10/20 floor to 7/1/2, one left
  std::vector<int> eleven(11);
  std::iota(eleven.begin(), eleven.end(), 0);
  const auto p11 = split_dataset(eleven, fr, 5);
  EXPECT_EQ(p11[0].size(), 8u);
  EXPECT_EQ(p11[1].size(), 1u);
  EXPECT_EQ(p11[2].size(), 2u);

  EXPECT_THROW(split_dataset(ten, {0.5, 0.5, 0.5}, 1), InvalidInput);
  EXPECT_THROW(split_dataset(std::vector<int>{1, 2}, fr, 1), InvalidInput);
}

TEST(Split, SeedDeterminism) {
  std::vector<int> cases(30);
  std::iota(cases.begin(), cases.end(), 0);
  const std::array<double, 3> fr{0.7, 0.1, 0.2};
  EXPECT_EQ(split_dataset(cases, fr, 11), split_dataset(cases, fr, 11));
  std::set<std::array<std::vector<int>, 3>> seen;
  for (std::uint64_t s = 0; s < 10; ++s) seen.insert(split_dataset(cases, fr, s));
  EXPECT_EQ(seen.size(), 10u);
}

TEST(Phantom, GeneratorContract) {
  PhantomSpec spec;
  spec.size = 32;
  spec.num_classes = 4;
  spec.noise_sigma = 0.0;
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto ph = generate_phantom<double>(spec, rng);
    std::array<index_t, 4> count{};
    for (index_t i = 0; i < ph.image.numel(); ++i) {
      const auto cls = ph.label.data[static_cast<std::size_t>(i)];
      ++count[static_cast<std::size_t>(cls)];
      if (cls == 0) ASSERT_EQ(ph.image[i], 0.0);
      else ASSERT_LE(std::fabs(ph.image[i] - cls), spec.band_halfwidth + 1e-12);
    }
    for (std::size_t c = 1; c < 4; ++c) EXPECT_GE(count[c], 1) << c;

    // threshold oracle: nearest class level
    LabelVolume seg(ph.label.shape);
    for (index_t i = 0; i < ph.image.numel(); ++i)
      seg.data[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(std::lround(ph.image[i]));
    const auto r = evaluate(seg, ph.label, 4, Spacing{1, 1, 1});
    for (double d : r.dice) EXPECT_EQ(d, 1.0);
  }
  spec.size = 20;
  EXPECT_THROW(generate_phantom<double>(spec, rng), InvalidSpec);
}

TEST(Manifest, DatasetRoundTrip) {
  TempDir dir;
  PhantomSpec spec;
  spec.size = 16;
  spec.seed = 5;
  const auto path = write_phantom_dataset(dir.file("set"), 3, spec);
  const auto recs = read_manifest(path);
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs[1].id, "case_001");
  const auto c = load_case<float>(recs[2]);
  EXPECT_EQ(c.image.shape(), (Shape{1, 16, 16, 16}));
  EXPECT_EQ(c.label.shape, (Shape{1, 16, 16, 16}));

  // regenerate the third phantom directly and compare
  Rng rng(spec.seed);
  Phantom<float> ph;
  for (int i = 0; i < 3; ++i) ph = generate_phantom<float>(spec, rng);
  EXPECT_EQ(c.image.values(), ph.image.values());
  EXPECT_EQ(c.label, ph.label);

  const auto bad = dir.file("bad.csv");
  std::ofstream(bad) << "# comment\n\ncase_a,x.nii,y.nii,1,1\n";
  try {
    read_manifest(bad);
    FAIL() << "expected a parse error";
  } catch (const InvalidInput& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
  std::ofstream(bad) << "case_a,x.nii,y.nii,1,0,1\n";
  EXPECT_THROW(read_manifest(bad), InvalidInput);
}
