#include <doctest.h>

#include <filesystem>

#include "smil/checkpoint.hpp"
#include "smil/model.hpp"
#include "smil/rng.hpp"

using namespace smil;

namespace {

ModelConfig tiny_config(Method method) {
  ModelConfig cfg;
  cfg.method = method;
  cfg.n_classes = 2;
  cfg.n_tiles = 16;
  cfg.downsampling = 16;
  cfg.sparse_conv_channels = {4, 4};
  cfg.attention_hidden = 6;
  cfg.lse_m = 2.0;
  cfg.n_aug = 1;
  cfg.augment = {false, false, 0};
  cfg.embedder.patch_channels = 1;
  cfg.embedder.patch_h = 8;
  cfg.embedder.patch_w = 8;
  cfg.embedder.conv_channels = {3, 4};
  cfg.embedder.embedding_dim = 8;
  return cfg;
}

Tensor random_patches(int k, Rng& rng) {
  Tensor t({k, 1, 8, 8});
  for (auto& v : t.data) {
    v = static_cast<float>(rng.uniform(0, 1));
  }
  return t;
}

std::vector<GridLoc> random_locations(int k, int full, Rng& rng) {
  std::vector<GridLoc> locs;
  for (int i = 0; i < k; ++i) {
    locs.push_back({static_cast<int>(rng.uniform_int(0, full - 1)),
                    static_cast<int>(rng.uniform_int(0, full - 1))});
  }
  return locs;
}

}  // namespace

TEST_CASE("embedder rows depend only on their own patch") {
  Rng rng(60);
  PatchEmbedderT<float> embedder(tiny_config(Method::emb_mean).embedder);
  embedder.init(rng);

  Tensor patches = random_patches(4, rng);
  // Duplicate patch 1 into slot 3.
  for (int i = 0; i < 64; ++i) {
    patches.at(3, 0, i / 8, i % 8) = patches.at(1, 0, i / 8, i % 8);
  }
  const Tensor emb = embedder.forward(patches);
  for (int j = 0; j < 8; ++j) {
    CHECK(emb.at(1, j) == emb.at(3, j));
  }

  // Batch-of-K equals the K batch-of-1 embeddings.
  for (int i = 0; i < 4; ++i) {
    Tensor one({1, 1, 8, 8});
    for (int p = 0; p < 64; ++p) {
      one.at(0, 0, p / 8, p % 8) = patches.at(i, 0, p / 8, p % 8);
    }
    const Tensor row = embedder.forward(one);
    for (int j = 0; j < 8; ++j) {
      CHECK(std::abs(row.at(0, j) - emb.at(i, j)) < 1e-6f);
    }
  }

  // Same seed gives bit-identical embeddings.
  Rng rng2(60);
  PatchEmbedderT<float> twin(tiny_config(Method::emb_mean).embedder);
  twin.init(rng2);
  Rng prng(61), prng2(61);
  const Tensor a = embedder.forward(random_patches(3, prng));
  Rng rng3(60);
  PatchEmbedderT<float> third(tiny_config(Method::emb_mean).embedder);
  third.init(rng3);
  const Tensor b = third.forward(random_patches(3, prng2));
  CHECK(a.data == b.data);
}

TEST_CASE("all methods emit probability rows that sum to one") {
  Rng rng(62);
  for (Method method : {Method::sparseconvmil, Method::emb_mean, Method::emb_max,
                        Method::attention, Method::gated_attention, Method::inst_mean,
                        Method::inst_max, Method::inst_lse}) {
    MilModel model(tiny_config(method));
    Rng init(63);
    model.init(init);
    BagView bag;
    const Tensor patches = random_patches(6, rng);
    bag.patches = &patches;
    bag.locations = random_locations(6, 128, rng);
    bag.full_h = bag.full_w = 128;
    ModelCache cache;
    const Tensor probs = model.forward(bag, ForwardMode::eval, nullptr, cache);
    REQUIRE(probs.shape == std::vector<int>({1, 2}));
    CHECK(probs.at(0, 0) > 0.0f);
    CHECK(probs.at(0, 1) > 0.0f);
    CHECK(std::abs(probs.at(0, 0) + probs.at(0, 1) - 1.0f) < 1e-6f);
  }
}

TEST_CASE("sparseconvmil is order-invariant but layout-sensitive") {
  Rng rng(64);
  MilModel model(tiny_config(Method::sparseconvmil));
  Rng init(65);
  model.init(init);

  const Tensor patches = random_patches(5, rng);
  const std::vector<GridLoc> locs = random_locations(5, 128, rng);
  BagView bag;
  bag.patches = &patches;
  bag.locations = locs;
  bag.full_h = bag.full_w = 128;
  ModelCache cache;
  const Tensor base = model.forward(bag, ForwardMode::eval, nullptr, cache);

  // Reorder instances: identical probabilities (map construction sorts).
  Tensor reordered({5, 1, 8, 8});
  std::vector<GridLoc> relocs(5);
  const int order[5] = {4, 2, 0, 3, 1};
  for (int i = 0; i < 5; ++i) {
    for (int p = 0; p < 64; ++p) {
      reordered.at(i, 0, p / 8, p % 8) = patches.at(order[i], 0, p / 8, p % 8);
    }
    relocs[static_cast<std::size_t>(i)] = locs[static_cast<std::size_t>(order[i])];
  }
  BagView shuffled;
  shuffled.patches = &reordered;
  shuffled.locations = relocs;
  shuffled.full_h = shuffled.full_w = 128;
  const Tensor out = model.forward(shuffled, ForwardMode::eval, nullptr, cache);
  CHECK(std::abs(out.at(0, 0) - base.at(0, 0)) < 1e-6f);
  CHECK(std::abs(out.at(0, 1) - base.at(0, 1)) < 1e-6f);

  // Same multiset of patches, different layouts: some pair differs.
  bool found_difference = false;
  for (int trial = 0; trial < 20 && !found_difference; ++trial) {
    BagView moved = bag;
    moved.locations = random_locations(5, 128, rng);
    const Tensor other = model.forward(moved, ForwardMode::eval, nullptr, cache);
    if (std::abs(other.at(0, 0) - base.at(0, 0)) > 1e-3f) {
      found_difference = true;
    }
  }
  CHECK(found_difference);
}

TEST_CASE("baselines ignore instance order and locations") {
  Rng rng(66);
  const Tensor patches = random_patches(6, rng);
  const std::vector<GridLoc> locs = random_locations(6, 256, rng);
  for (Method method : {Method::emb_mean, Method::emb_max, Method::attention,
                        Method::gated_attention, Method::inst_mean, Method::inst_max,
                        Method::inst_lse}) {
    MilModel model(tiny_config(method));
    Rng init(67);
    model.init(init);
    BagView bag;
    bag.patches = &patches;
    bag.locations = locs;
    bag.full_h = bag.full_w = 256;
    ModelCache cache;
    const Tensor base = model.forward(bag, ForwardMode::eval, nullptr, cache);

    // Relocation leaves probabilities bit-identical.
    BagView moved = bag;
    moved.locations = random_locations(6, 256, rng);
    const Tensor relocated = model.forward(moved, ForwardMode::eval, nullptr, cache);
    CHECK(relocated.data == base.data);

    // Permuting instances stays within 1e-6.
    Tensor reordered({6, 1, 8, 8});
    const int order[6] = {5, 3, 1, 0, 4, 2};
    for (int i = 0; i < 6; ++i) {
      for (int p = 0; p < 64; ++p) {
        reordered.at(i, 0, p / 8, p % 8) = patches.at(order[i], 0, p / 8, p % 8);
      }
    }
    BagView shuffled = bag;
    shuffled.patches = &reordered;
    const Tensor permuted = model.forward(shuffled, ForwardMode::eval, nullptr, cache);
    CHECK(std::abs(permuted.at(0, 0) - base.at(0, 0)) < 1e-6f);
  }
}

TEST_CASE("singleton bags make all embedding-level methods agree") {
  Rng rng(68);
  const Tensor patch = random_patches(1, rng);
  BagView bag;
  bag.patches = &patch;
  bag.locations = {{10, 10}};
  bag.full_h = bag.full_w = 64;

  // Pooling a single instance is the identity for every embedding-level
  // operator, so with a shared embedder and classifier all four methods give
  // the same probabilities.
  MilModel reference(tiny_config(Method::emb_mean));
  Rng init(69);
  reference.init(init);
  ModelCache cache;
  const Tensor base = reference.forward(bag, ForwardMode::eval, nullptr, cache);

  for (Method method : {Method::emb_max, Method::attention, Method::gated_attention}) {
    MilModel model(tiny_config(method));
    Rng other(70);
    model.init(other);
    auto dst = model.embedder.parameters("e");
    auto src = reference.embedder.parameters("e");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i].value->data = src[i].value->data;
    }
    model.classifier.weight.data = reference.classifier.weight.data;
    model.classifier.bias.data = reference.classifier.bias.data;
    const Tensor probs = model.forward(bag, ForwardMode::eval, nullptr, cache);
    CHECK(std::abs(probs.at(0, 0) - base.at(0, 0)) < 1e-6f);
    CHECK(std::abs(probs.at(0, 1) - base.at(0, 1)) < 1e-6f);
  }
}

TEST_CASE("n_aug=2 with identity augment template duplicates the output row") {
  ModelConfig cfg = tiny_config(Method::sparseconvmil);
  cfg.n_aug = 2;
  cfg.augment = {false, false, 0};
  MilModel model(cfg);
  Rng init(71), rng(72), aug(73);
  model.init(init);
  const Tensor patches = random_patches(4, rng);
  BagView bag;
  bag.patches = &patches;
  bag.locations = random_locations(4, 128, rng);
  bag.full_h = bag.full_w = 128;
  ModelCache cache;
  const Tensor probs = model.forward(bag, ForwardMode::train, &aug, cache);
  REQUIRE(probs.shape == std::vector<int>({2, 2}));
  CHECK(probs.at(0, 0) == probs.at(1, 0));
  CHECK(probs.at(0, 1) == probs.at(1, 1));
}

TEST_CASE("bags collapsing to one cell match the hand-assembled pipeline") {
  ModelConfig cfg = tiny_config(Method::sparseconvmil);
  cfg.downsampling = 1024;  // larger than the slide extent: everything lands at (0, 0)
  MilModel model(cfg);
  Rng init(74), rng(75);
  model.init(init);
  const Tensor patches = random_patches(5, rng);
  BagView bag;
  bag.patches = &patches;
  bag.locations = random_locations(5, 512, rng);
  bag.full_h = bag.full_w = 512;
  ModelCache cache;
  const Tensor probs = model.forward(bag, ForwardMode::eval, nullptr, cache);

  // By hand: sum the embeddings into a single-cell map, run the stack.
  const Tensor emb = model.embedder.forward(patches);
  SparseMap map(1, 1, cfg.embedder.embedding_dim);
  std::vector<float> sum(static_cast<std::size_t>(cfg.embedder.embedding_dim), 0.0f);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < cfg.embedder.embedding_dim; ++j) {
      sum[static_cast<std::size_t>(j)] += emb.at(i, j);
    }
  }
  map.push_cell(0, 0, std::span<const float>(sum.data(), sum.size()));
  map = coalesce(map);
  REQUIRE(cache.build.map.n_active() == 1);
  SparseMap current = map;
  for (auto& layer : model.sparse_layers) {
    current = relu_map(layer.forward(current));
  }
  const Tensor dense = adaptive_pool_to_dense(current, 1, 1, cfg.adaptive_pool);
  const Tensor logits =
      model.classifier.forward(Tensor::from({1, dense.shape[2]}, dense.data));
  const Tensor want = softmax_forward(logits);
  CHECK(probs.at(0, 0) == doctest::Approx(want.at(0, 0)).epsilon(1e-6));
  CHECK(probs.at(0, 1) == doctest::Approx(want.at(0, 1)).epsilon(1e-6));
}

TEST_CASE("zero upstream gradient leaves all parameter gradients zero") {
  Rng rng(76);
  for (Method method : {Method::sparseconvmil, Method::attention, Method::inst_max}) {
    MilModel model(tiny_config(method));
    Rng init(77);
    model.init(init);
    const Tensor patches = random_patches(4, rng);
    BagView bag;
    bag.patches = &patches;
    bag.locations = random_locations(4, 128, rng);
    bag.full_h = bag.full_w = 128;
    ModelCache cache;
    const Tensor probs = model.forward(bag, ForwardMode::eval, nullptr, cache);
    model.zero_grad();
    model.backward(cache, Tensor(probs.shape));
    for (auto& p : model.parameters()) {
      for (float g : p.grad->data) {
        CHECK(g == 0.0f);
      }
    }
  }
}

TEST_CASE("gradients are deterministic across repeated runs") {
  auto run = [] {
    MilModel model(tiny_config(Method::sparseconvmil));
    Rng init(78), rng(79);
    model.init(init);
    const Tensor patches = random_patches(4, rng);
    BagView bag;
    bag.patches = &patches;
    bag.locations = random_locations(4, 128, rng);
    bag.full_h = bag.full_w = 128;
    ModelCache cache;
    Tensor probs = model.forward(bag, ForwardMode::eval, nullptr, cache);
    Tensor grad(probs.shape);
    grad.at(0, 0) = 1.5f;
    grad.at(0, 1) = -0.5f;
    model.zero_grad();
    model.backward(cache, grad);
    std::vector<float> flat;
    for (auto& p : model.parameters()) {
      flat.insert(flat.end(), p.grad->data.begin(), p.grad->data.end());
    }
    return flat;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round-trips the model bit for bit") {
  namespace fs = std::filesystem;
  RunConfig config;
  config.model = tiny_config(Method::sparseconvmil);
  MilModel model(config.model);
  Rng init(80);
  model.init(init);

  const fs::path path = fs::temp_directory_path() / "smil_test_checkpoint.smck";
  save_checkpoint(path, model, config, 123);
  LoadedModel loaded = load_checkpoint(path);
  CHECK(loaded.step == 123);
  CHECK(loaded.config.model.method == Method::sparseconvmil);
  CHECK(loaded.config.model.downsampling == config.model.downsampling);

  auto a = model.parameters();
  auto b = loaded.model.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].value->data == b[i].value->data);
  }

  // Same bag, same probabilities.
  Rng rng(81);
  const Tensor patches = random_patches(4, rng);
  BagView bag;
  bag.patches = &patches;
  bag.locations = random_locations(4, 128, rng);
  bag.full_h = bag.full_w = 128;
  ModelCache cache;
  const Tensor p1 = model.forward(bag, ForwardMode::eval, nullptr, cache);
  const Tensor p2 = loaded.model.forward(bag, ForwardMode::eval, nullptr, cache);
  CHECK(p1.data == p2.data);
  fs::remove(path);
}
