#include "ckd/model_zoo.hpp"

#include <fmt/format.h>

#include <cmath>

#include "ckd/serialize.hpp"

namespace ckd {

namespace {

int scaled(int base, double mult) { return std::max(1, static_cast<int>(std::lround(base * mult))); }

void add_inplace(Tensor& a, const Tensor& b) {
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) a[i] += b[i];
}

/// Pre-activation residual block (wide-residual family).
class PreactBlock : public Layer {
 public:
  PreactBlock(int in_ch, int out_ch, int stride, Rng& rng)
      : bn1_(in_ch),
        conv1_(in_ch, out_ch, 3, stride, 1, false, rng),
        bn2_(out_ch),
        conv2_(out_ch, out_ch, 3, 1, 1, false, rng) {
    if (in_ch != out_ch || stride != 1) {
      proj_ = std::make_unique<Conv2d>(in_ch, out_ch, 1, stride, 0, false, rng);
    }
  }

  Tensor forward(const Tensor& x, bool train) override {
    Tensor h = relu1_.forward(bn1_.forward(x, train), train);
    Tensor y = conv2_.forward(relu2_.forward(bn2_.forward(conv1_.forward(h, train), train), train), train);
    if (proj_) {
      add_inplace(y, proj_->forward(h, train));
    } else {
      add_inplace(y, x);
    }
    return y;
  }

  Tensor backward(const Tensor& dy) override {
    Tensor dh = conv1_.backward(bn2_.backward(relu2_.backward(conv2_.backward(dy))));
    if (proj_) {
      add_inplace(dh, proj_->backward(dy));
      return bn1_.backward(relu1_.backward(dh));
    }
    Tensor dx = bn1_.backward(relu1_.backward(dh));
    add_inplace(dx, dy);
    return dx;
  }

  void collect_params(std::vector<Param*>& out) override {
    bn1_.collect_params(out);
    conv1_.collect_params(out);
    bn2_.collect_params(out);
    conv2_.collect_params(out);
    if (proj_) proj_->collect_params(out);
  }

  void collect_tensors(const std::string& prefix, std::vector<NamedTensor>& out) override {
    bn1_.collect_tensors(prefix + ".bn1", out);
    conv1_.collect_tensors(prefix + ".conv1", out);
    bn2_.collect_tensors(prefix + ".bn2", out);
    conv2_.collect_tensors(prefix + ".conv2", out);
    if (proj_) proj_->collect_tensors(prefix + ".proj", out);
  }

 private:
  BatchNorm2d bn1_;
  ReLU relu1_;
  Conv2d conv1_;
  BatchNorm2d bn2_;
  ReLU relu2_;
  Conv2d conv2_;
  std::unique_ptr<Conv2d> proj_;
};

/// Post-activation basic block (residual family).
class BasicBlock : public Layer {
 public:
  BasicBlock(int in_ch, int out_ch, int stride, Rng& rng)
      : conv1_(in_ch, out_ch, 3, stride, 1, false, rng),
        bn1_(out_ch),
        conv2_(out_ch, out_ch, 3, 1, 1, false, rng),
        bn2_(out_ch) {
    if (in_ch != out_ch || stride != 1) {
      proj_ = std::make_unique<Conv2d>(in_ch, out_ch, 1, stride, 0, false, rng);
      proj_bn_ = std::make_unique<BatchNorm2d>(out_ch);
    }
  }

  Tensor forward(const Tensor& x, bool train) override {
    Tensor y = bn2_.forward(conv2_.forward(relu1_.forward(bn1_.forward(conv1_.forward(x, train), train), train), train), train);
    if (proj_) {
      add_inplace(y, proj_bn_->forward(proj_->forward(x, train), train));
    } else {
      add_inplace(y, x);
    }
    return relu_out_.forward(y, train);
  }

  Tensor backward(const Tensor& dy) override {
    Tensor dz = relu_out_.backward(dy);
    Tensor dx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(dz)))));
    if (proj_) {
      add_inplace(dx, proj_->backward(proj_bn_->backward(dz)));
    } else {
      add_inplace(dx, dz);
    }
    return dx;
  }

  void collect_params(std::vector<Param*>& out) override {
    conv1_.collect_params(out);
    bn1_.collect_params(out);
    conv2_.collect_params(out);
    bn2_.collect_params(out);
    if (proj_) {
      proj_->collect_params(out);
      proj_bn_->collect_params(out);
    }
  }

  void collect_tensors(const std::string& prefix, std::vector<NamedTensor>& out) override {
    conv1_.collect_tensors(prefix + ".conv1", out);
    bn1_.collect_tensors(prefix + ".bn1", out);
    conv2_.collect_tensors(prefix + ".conv2", out);
    bn2_.collect_tensors(prefix + ".bn2", out);
    if (proj_) {
      proj_->collect_tensors(prefix + ".proj", out);
      proj_bn_->collect_tensors(prefix + ".proj_bn", out);
    }
  }

 private:
  Conv2d conv1_;
  BatchNorm2d bn1_;
  ReLU relu1_;
  Conv2d conv2_;
  BatchNorm2d bn2_;
  ReLU relu_out_;
  std::unique_ptr<Conv2d> proj_;
  std::unique_ptr<BatchNorm2d> proj_bn_;
};

std::unique_ptr<Sequential> separable_block(int in_ch, int out_ch, int stride, Rng& rng) {
  auto s = std::make_unique<Sequential>();
  s->add("dw", std::make_unique<Conv2d>(in_ch, in_ch, 3, stride, 1, false, rng, /*depthwise=*/true));
  s->add("dw_bn", std::make_unique<BatchNorm2d>(in_ch));
  s->add("dw_relu", std::make_unique<ReLU>());
  s->add("pw", std::make_unique<Conv2d>(in_ch, out_ch, 1, 1, 0, false, rng));
  s->add("pw_bn", std::make_unique<BatchNorm2d>(out_ch));
  s->add("pw_relu", std::make_unique<ReLU>());
  return s;
}

constexpr int kMobileChannels[8] = {64, 128, 128, 256, 256, 512, 512, 512};
constexpr int kMobileStrides[8] = {1, 2, 1, 2, 1, 2, 1, 1};

}  // namespace

std::string family_name(Family f) {
  switch (f) {
    case Family::WideResidual: return "wrn";
    case Family::Residual: return "resnet";
    case Family::Mobile: return "mobile";
  }
  throw Error("unknown family");
}

Family family_from_name(const std::string& s) {
  if (s == "wrn") return Family::WideResidual;
  if (s == "resnet") return Family::Residual;
  if (s == "mobile") return Family::Mobile;
  throw ConfigError(fmt::format("unknown network family '{}'", s));
}

void ArchSpec::validate() const {
  if (num_classes < 2) {
    throw ConfigError(fmt::format("num_classes: must be >= 2, got {}", num_classes));
  }
  if (width_multiplier <= 0.0) {
    throw ConfigError(fmt::format("width_multiplier: must be positive, got {}", width_multiplier));
  }
  if (input_resolution < 8) {
    throw ConfigError(fmt::format("input_resolution: must be >= 8, got {}", input_resolution));
  }
  switch (family) {
    case Family::WideResidual:
      if (depth < 10 || (depth - 4) % 6 != 0) {
        throw ConfigError(fmt::format("depth: wrn family requires depth = 6n+4 with n >= 1, got {}", depth));
      }
      break;
    case Family::Residual:
      if (depth < 8 || (depth - 2) % 6 != 0) {
        throw ConfigError(fmt::format("depth: resnet family requires depth = 6n+2 with n >= 1, got {}", depth));
      }
      break;
    case Family::Mobile:
      if (depth < 3 || depth > 8) {
        throw ConfigError(fmt::format("depth: mobile family supports 3..8 separable blocks, got {}", depth));
      }
      break;
  }
}

std::string ArchSpec::describe() const {
  return fmt::format("{}-d{}-w{:g} (K={}, {}px)", family_name(family), depth, width_multiplier,
                     num_classes, input_resolution);
}

ArchSpec arch_preset(const std::string& id, int num_classes, int input_resolution) {
  ArchSpec spec;
  spec.num_classes = num_classes;
  spec.input_resolution = input_resolution;
  std::string rest;
  if (id.rfind("wrn", 0) == 0) {
    spec.family = Family::WideResidual;
    spec.depth = 16;
    rest = id.substr(3);
  } else if (id.rfind("resnet", 0) == 0) {
    spec.family = Family::Residual;
    spec.depth = 20;
    rest = id.substr(6);
  } else if (id.rfind("mobile", 0) == 0) {
    spec.family = Family::Mobile;
    spec.depth = 6;
    rest = id.substr(6);
  } else {
    throw ConfigError(fmt::format("unknown architecture preset '{}'", id));
  }
  // Suffixes: -d<depth> and -w<width>, in any order.
  while (!rest.empty()) {
    if (rest[0] != '-' || rest.size() < 3) {
      throw ConfigError(fmt::format("malformed architecture preset '{}'", id));
    }
    const char tag = rest[1];
    if (tag != 'd' && tag != 'w') {
      throw ConfigError(fmt::format("malformed architecture preset '{}': unknown suffix -{}", id, tag));
    }
    std::size_t used = 0;
    const std::string value = rest.substr(2);
    try {
      if (tag == 'd') {
        spec.depth = std::stoi(value, &used);
      } else {
        spec.width_multiplier = std::stod(value, &used);
      }
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("malformed architecture preset '{}': bad value after -{}", id, tag));
    }
    rest = rest.substr(2 + used);
  }
  spec.validate();
  return spec;
}

Model::Model(const ArchSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  Rng rng(mix_seed(seed, "model-init"));

  switch (spec_.family) {
    case Family::WideResidual: {
      const int n = (spec_.depth - 4) / 6;
      const int widths[3] = {scaled(16, spec_.width_multiplier), scaled(32, spec_.width_multiplier),
                             scaled(64, spec_.width_multiplier)};
      body_.add("stem", std::make_unique<Conv2d>(3, 16, 3, 1, 1, false, rng));
      int ch = 16;
      for (int g = 0; g < 3; ++g) {
        for (int b = 0; b < n; ++b) {
          const int stride = (b == 0 && g > 0) ? 2 : 1;
          body_.add(fmt::format("g{}b{}", g + 1, b),
                    std::make_unique<PreactBlock>(ch, widths[g], stride, rng));
          ch = widths[g];
        }
      }
      body_.add("final_bn", std::make_unique<BatchNorm2d>(ch));
      body_.add("final_relu", std::make_unique<ReLU>());
      feature_channels_ = ch;
      break;
    }
    case Family::Residual: {
      const int n = (spec_.depth - 2) / 6;
      const int widths[3] = {scaled(16, spec_.width_multiplier), scaled(32, spec_.width_multiplier),
                             scaled(64, spec_.width_multiplier)};
      body_.add("stem", std::make_unique<Conv2d>(3, widths[0], 3, 1, 1, false, rng));
      body_.add("stem_bn", std::make_unique<BatchNorm2d>(widths[0]));
      body_.add("stem_relu", std::make_unique<ReLU>());
      int ch = widths[0];
      for (int g = 0; g < 3; ++g) {
        for (int b = 0; b < n; ++b) {
          const int stride = (b == 0 && g > 0) ? 2 : 1;
          body_.add(fmt::format("g{}b{}", g + 1, b),
                    std::make_unique<BasicBlock>(ch, widths[g], stride, rng));
          ch = widths[g];
        }
      }
      feature_channels_ = ch;
      break;
    }
    case Family::Mobile: {
      const int stem = scaled(32, spec_.width_multiplier);
      body_.add("stem", std::make_unique<Conv2d>(3, stem, 3, 1, 1, false, rng));
      body_.add("stem_bn", std::make_unique<BatchNorm2d>(stem));
      body_.add("stem_relu", std::make_unique<ReLU>());
      int ch = stem;
      for (int b = 0; b < spec_.depth; ++b) {
        const int out = scaled(kMobileChannels[b], spec_.width_multiplier);
        body_.add(fmt::format("sep{}", b), separable_block(ch, out, kMobileStrides[b], rng));
        ch = out;
      }
      feature_channels_ = ch;
      break;
    }
  }
  head_ = std::make_unique<Linear>(feature_channels_, spec_.num_classes, true, rng);
}

ForwardOutput Model::forward(const Tensor& images, bool train) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ShapeError(fmt::format("model input must be (N,3,H,W), got {}", images.shape_str()));
  }
  if (images.dim(2) != spec_.input_resolution || images.dim(3) != spec_.input_resolution) {
    throw ShapeError(fmt::format("input resolution {}x{} does not match arch resolution {}",
                                 images.dim(2), images.dim(3), spec_.input_resolution));
  }
  ForwardOutput out;
  out.features = body_.forward(images, train);
  out.logits = head_->forward(pool_.forward(out.features, train), train);
  return out;
}

void Model::backward_from_logits(const Tensor& dlogits) {
  body_.backward(pool_.backward(head_->backward(dlogits)));
}

std::vector<Param*> Model::params() {
  std::vector<Param*> out;
  body_.collect_params(out);
  head_->collect_params(out);
  return out;
}

std::vector<NamedTensor> Model::named_tensors() {
  std::vector<NamedTensor> out;
  body_.collect_tensors("body", out);
  head_->collect_tensors("head", out);
  return out;
}

std::int64_t Model::param_count() {
  std::int64_t n = 0;
  for (const Param* p : params()) n += p->value.size();
  return n;
}

void Model::save(const std::filesystem::path& path) {
  std::vector<NamedTensorView> views;
  for (const auto& nt : named_tensors()) views.push_back({nt.name, nt.tensor});
  save_tensors(path, views);
}

void Model::load(const std::filesystem::path& path) {
  auto stored = load_tensors(path);
  auto tensors = named_tensors();
  if (stored.size() != tensors.size()) {
    throw IoError(fmt::format("{}: tensor count {} does not match architecture ({} expected)",
                              path.string(), stored.size(), tensors.size()));
  }
  for (auto& nt : tensors) {
    auto it = stored.find(nt.name);
    if (it == stored.end()) throw IoError(fmt::format("{}: missing tensor '{}'", path.string(), nt.name));
    if (it->second.shape() != nt.tensor->shape()) {
      throw IoError(fmt::format("{}: shape mismatch for '{}': {} vs {}", path.string(), nt.name,
                                shape_to_string(it->second.shape()), nt.tensor->shape_str()));
    }
    *nt.tensor = std::move(it->second);
  }
}

std::uint64_t Model::checksum() {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& nt : named_tensors()) {
    h = fnv1a64(nt.name.data(), nt.name.size(), h);
    h = fnv1a64(nt.tensor->data(), static_cast<std::size_t>(nt.tensor->size()) * sizeof(float), h);
  }
  return h;
}

std::unique_ptr<Model> build_model(const ArchSpec& spec, std::uint64_t seed) {
  return std::make_unique<Model>(spec, seed);
}

}  // namespace ckd
