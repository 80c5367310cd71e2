#include "subseg/model.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace subseg {

using ad::Var;
using nlohmann::json;

namespace {

constexpr double kTwoPi = 6.283185307179586;

long encoder_heads(long dim) { return std::max(1L, dim / 32); }

Var linear(const Var& x, const Var& w, const Var& b) { return ad::add_row(ad::matmul(x, w), b); }

}  // namespace

ModelConfig ModelConfig::desk(long in_channels) {
  ModelConfig c;
  c.encoder_dims = {8, 16, 16, 32};
  c.encoder_depths = {1, 1, 2, 1};
  c.prompt_embed_dim = 32;
  c.decoder_layers = 2;
  c.decoder_heads = 8;
  c.input_size = {64, 64};
  c.in_channels = in_channels;
  c.desk_scale = true;
  return c;
}

void ModelConfig::validate() const {
  if (encoder_dims.size() != encoder_depths.size())
    throw std::invalid_argument("config: encoder_dims and encoder_depths lengths differ");
  if (encoder_dims.size() != 4)
    throw std::invalid_argument("config: encoder expects exactly 4 stages");
  for (long d : encoder_dims)
    if (d <= 0) throw std::invalid_argument("config: encoder_dims must be positive");
  for (long d : encoder_depths)
    if (d < 1) throw std::invalid_argument("config: encoder_depths must be >= 1");
  if (encoder_dims[0] % 2 != 0)
    throw std::invalid_argument("config: first stage width must be even (stem runs at half width)");
  for (size_t s = 1; s < encoder_dims.size(); ++s)
    if (encoder_dims[s] % encoder_heads(encoder_dims[s]) != 0)
      throw std::invalid_argument("config: stage width " + std::to_string(encoder_dims[s]) +
                                  " is not divisible by its head count");
  if (decoder_heads < 1) throw std::invalid_argument("config: decoder_heads must be >= 1");
  if (decoder_layers < 1) throw std::invalid_argument("config: decoder_layers must be >= 1");
  if (prompt_embed_dim < 4 || prompt_embed_dim % 4 != 0)
    throw std::invalid_argument("config: prompt_embed_dim must be a positive multiple of 4");
  if (prompt_embed_dim % decoder_heads != 0)
    throw std::invalid_argument("config: prompt_embed_dim not divisible by decoder_heads");
  for (long s : input_size)
    if (s < 16 || s % 16 != 0)
      throw std::invalid_argument("config: input_size must be a positive multiple of 16");
  if (in_channels != 1 && in_channels != 4)
    throw std::invalid_argument("config: in_channels must be 1 or 4");
}

std::string ModelConfig::to_json() const {
  json j;
  j["encoder_dims"] = encoder_dims;
  j["encoder_depths"] = encoder_depths;
  j["prompt_embed_dim"] = prompt_embed_dim;
  j["decoder_layers"] = decoder_layers;
  j["decoder_heads"] = decoder_heads;
  j["input_size"] = input_size;
  j["in_channels"] = in_channels;
  j["desk_scale"] = desk_scale;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.encoder_dims = j.at("encoder_dims").get<std::vector<long>>();
    c.encoder_depths = j.at("encoder_depths").get<std::vector<long>>();
    c.prompt_embed_dim = j.at("prompt_embed_dim").get<long>();
    c.decoder_layers = j.at("decoder_layers").get<long>();
    c.decoder_heads = j.at("decoder_heads").get<long>();
    c.input_size = j.at("input_size").get<std::array<long, 2>>();
    c.in_channels = j.at("in_channels").get<long>();
    c.desk_scale = j.at("desk_scale").get<bool>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: bad JSON: ") + e.what());
  }
  c.validate();
  return c;
}

std::array<long, 2> Model::feature_hw() const {
  return {cfg_.input_size[0] / 16, cfg_.input_size[1] / 16};
}

Model::Model(ModelConfig config, uint64_t seed) : cfg_(std::move(config)) {
  cfg_.validate();
  Rng rng(seed);
  const auto& dims = cfg_.encoder_dims;
  const auto& depths = cfg_.encoder_depths;
  const long d = cfg_.prompt_embed_dim;

  auto conv = [&](const std::string& name, long co, long ci, long k) {
    store_.create(name + ".w", nn::init_conv(co, ci, k, rng));
    store_.create(name + ".b", Tensor({co}));
  };
  auto lin = [&](const std::string& name, long di, long dq) {
    store_.create(name + ".w", nn::init_linear(di, dq, rng));
    store_.create(name + ".b", Tensor({dq}));
  };
  auto ln = [&](const std::string& name, long width) {
    store_.create(name + ".g", Tensor({width}, 1.0));
    store_.create(name + ".b", Tensor({width}));
  };
  auto attn = [&](const std::string& name, long width) {
    lin(name + ".q", width, width);
    lin(name + ".k", width, width);
    lin(name + ".v", width, width);
    lin(name + ".o", width, width);
  };
  auto mlp = [&](const std::string& name, long width) {
    lin(name + ".fc1", width, 4 * width);
    lin(name + ".fc2", 4 * width, width);
  };

  // stem: /4 resolution, first stage width
  conv("enc.stem.c1", dims[0] / 2, 3, 3);
  conv("enc.stem.c2", dims[0], dims[0] / 2, 3);
  // stage 0: residual conv blocks at /4
  for (long i = 0; i < depths[0]; ++i) {
    conv("enc.s0.b" + std::to_string(i) + ".c1", dims[0], dims[0], 3);
    conv("enc.s0.b" + std::to_string(i) + ".c2", dims[0], dims[0], 3);
  }
  // stages 1..3: downsampling conv then transformer blocks
  long h = cfg_.input_size[0] / 4, w = cfg_.input_size[1] / 4;
  for (int s = 1; s <= 3; ++s) {
    const long width = dims[size_t(s)];
    if (s < 3) {
      h /= 2;
      w /= 2;
    }
    conv("enc.down" + std::to_string(s), width, dims[size_t(s - 1)], 3);
    store_.create("enc.s" + std::to_string(s) + ".pos", nn::init_normal({h * w, width}, 0.02, rng));
    for (long i = 0; i < depths[size_t(s)]; ++i) {
      const std::string pf = "enc.s" + std::to_string(s) + ".b" + std::to_string(i);
      ln(pf + ".ln1", width);
      attn(pf + ".attn", width);
      ln(pf + ".ln2", width);
      mlp(pf + ".mlp", width);
    }
  }

  // neck: project final stage onto the prompt embedding width
  conv("neck", d, dims[3], 1);
  ln("neck.ln", d);

  // decoder tokens and two-way transformer
  store_.create("dec.img_pos", nn::init_normal({h * w, d}, 0.02, rng));
  store_.create("dec.mask_token", nn::init_normal({1, d}, 0.02, rng));
  store_.create("dec.no_prompt", nn::init_normal({1, d}, 0.02, rng));
  store_.create("dec.corner_tl", nn::init_normal({1, d}, 0.02, rng));
  store_.create("dec.corner_br", nn::init_normal({1, d}, 0.02, rng));
  for (long l = 0; l < cfg_.decoder_layers; ++l) {
    const std::string pf = "dec.l" + std::to_string(l);
    attn(pf + ".self", d);
    ln(pf + ".ln1", d);
    attn(pf + ".t2i", d);
    ln(pf + ".ln2", d);
    mlp(pf + ".mlp", d);
    ln(pf + ".ln3", d);
    attn(pf + ".i2t", d);
    ln(pf + ".ln4", d);
  }
  attn("dec.final", d);
  ln("dec.final_ln", d);

  // mask upscaling and the hypernetwork head
  store_.create("dec.up1.w", nn::init_upconv(d, d / 2, rng));
  store_.create("dec.up1.b", Tensor({d / 2}));
  store_.create("dec.up2.w", nn::init_upconv(d / 2, d / 4, rng));
  store_.create("dec.up2.b", Tensor({d / 4}));
  lin("dec.hyper.fc1", d, d);
  lin("dec.hyper.fc2", d, d / 4);

  // fixed Gaussian projection for box corner positional encoding
  store_.create_buffer("pe_b", nn::init_normal({2, d / 2}, 1.0, rng));
}

namespace {

// Multi-head attention with parameters fetched from the store by prefix.
Var mha(const nn::ParamStore& ps, const std::string& prefix, const Var& q_in, const Var& kv_in,
        long heads) {
  const Var q = linear(q_in, ps.get(prefix + ".q.w"), ps.get(prefix + ".q.b"));
  const Var k = linear(kv_in, ps.get(prefix + ".k.w"), ps.get(prefix + ".k.b"));
  const Var v = linear(kv_in, ps.get(prefix + ".v.w"), ps.get(prefix + ".v.b"));
  const long hd = q.value().dims[1] / heads;
  std::vector<Var> outs;
  outs.reserve(size_t(heads));
  for (long hh = 0; hh < heads; ++hh) {
    const Var qh = ad::slice_cols(q, hh * hd, hd);
    const Var kh = ad::slice_cols(k, hh * hd, hd);
    const Var vh = ad::slice_cols(v, hh * hd, hd);
    const Var scores =
        ad::scalar_mul(ad::matmul(qh, ad::transpose(kh)), 1.0 / std::sqrt(double(hd)));
    outs.push_back(ad::matmul(ad::softmax_rows(scores), vh));
  }
  return linear(ad::concat_cols(outs), ps.get(prefix + ".o.w"), ps.get(prefix + ".o.b"));
}

Var mlp_fwd(const nn::ParamStore& ps, const std::string& prefix, const Var& x) {
  const Var hx = ad::gelu(linear(x, ps.get(prefix + ".fc1.w"), ps.get(prefix + ".fc1.b")));
  return linear(hx, ps.get(prefix + ".fc2.w"), ps.get(prefix + ".fc2.b"));
}

Var norm(const nn::ParamStore& ps, const std::string& prefix, const Var& x) {
  return ad::layernorm_rows(x, ps.get(prefix + ".g"), ps.get(prefix + ".b"));
}

}  // namespace

Var Model::encode_channel(const Tensor& chan) const {
  const auto& dims = cfg_.encoder_dims;
  const auto& depths = cfg_.encoder_depths;

  Var x = Var::constant(chan);
  x = ad::gelu(ad::conv2d(x, store_.get("enc.stem.c1.w"), store_.get("enc.stem.c1.b"), 2, 1));
  x = ad::gelu(ad::conv2d(x, store_.get("enc.stem.c2.w"), store_.get("enc.stem.c2.b"), 2, 1));

  for (long i = 0; i < depths[0]; ++i) {
    const std::string pf = "enc.s0.b" + std::to_string(i);
    Var hx = ad::conv2d(x, store_.get(pf + ".c1.w"), store_.get(pf + ".c1.b"), 1, 1);
    hx = ad::conv2d(ad::gelu(hx), store_.get(pf + ".c2.w"), store_.get(pf + ".c2.b"), 1, 1);
    x = ad::add(x, hx);
  }

  long hh = cfg_.input_size[0] / 4, ww = cfg_.input_size[1] / 4;
  for (int s = 1; s <= 3; ++s) {
    const long width = dims[size_t(s)];
    const int stride = s < 3 ? 2 : 1;
    if (s < 3) {
      hh /= 2;
      ww /= 2;
    }
    x = ad::conv2d(x, store_.get("enc.down" + std::to_string(s) + ".w"),
                   store_.get("enc.down" + std::to_string(s) + ".b"), stride, 1);
    Var t = ad::transpose(ad::reshape_copy(x, {width, hh * ww}));
    t = ad::add(t, store_.get("enc.s" + std::to_string(s) + ".pos"));
    const long heads = encoder_heads(width);
    for (long i = 0; i < depths[size_t(s)]; ++i) {
      const std::string pf = "enc.s" + std::to_string(s) + ".b" + std::to_string(i);
      const Var a = norm(store_, pf + ".ln1", t);
      t = ad::add(t, mha(store_, pf + ".attn", a, a, heads));
      t = ad::add(t, mlp_fwd(store_, pf + ".mlp", norm(store_, pf + ".ln2", t)));
    }
    x = ad::reshape_copy(ad::transpose(t), {width, hh, ww});
  }
  return x;
}

std::vector<Var> Model::encode_per_modality_vars(const Tensor& slice) const {
  if (slice.rank() != 3 || slice.dim(0) != cfg_.input_size[0] ||
      slice.dim(1) != cfg_.input_size[1] || slice.dim(2) != cfg_.in_channels)
    throw std::invalid_argument("encode: slice shape " + shape_str(slice.dims) +
                                " does not match configured " +
                                shape_str({cfg_.input_size[0], cfg_.input_size[1],
                                           cfg_.in_channels}));
  const long H = slice.dim(0), W = slice.dim(1), M = slice.dim(2);
  std::vector<Var> maps;
  maps.reserve(size_t(M));
  for (long m = 0; m < M; ++m) {
    Tensor chan({3, H, W});
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        const double v = slice.data[size_t((y * W + x) * M + m)] / 255.0;
        for (long c = 0; c < 3; ++c) chan.data[size_t((c * H + y) * W + x)] = v;
      }
    maps.push_back(encode_channel(chan));
  }
  return maps;
}

Var Model::encode_prompt_var(const SpatialPrompt& prompt) const {
  if (prompt.empty_flag) throw std::invalid_argument("encode_prompt: empty prompt");
  const long H = cfg_.input_size[0], W = cfg_.input_size[1];
  if (prompt.row_min > prompt.row_max || prompt.col_min > prompt.col_max ||
      prompt.row_min < 0 || prompt.col_min < 0 || prompt.row_max >= H || prompt.col_max >= W)
    throw std::invalid_argument("encode_prompt: box outside image bounds");

  const Tensor& pe_b = store_.get("pe_b").value();
  const long half = cfg_.prompt_embed_dim / 2;
  auto point_pe = [&](long row, long col) {
    const double u0 = 2.0 * (double(row) + 0.5) / double(H) - 1.0;
    const double u1 = 2.0 * (double(col) + 0.5) / double(W) - 1.0;
    Tensor e({1, cfg_.prompt_embed_dim});
    for (long j = 0; j < half; ++j) {
      const double proj = kTwoPi * (u0 * pe_b.at2(0, j) + u1 * pe_b.at2(1, j));
      e.data[size_t(j)] = std::sin(proj);
      e.data[size_t(half + j)] = std::cos(proj);
    }
    return e;
  };

  const Var tl = ad::add_fixed(store_.get("dec.corner_tl"), point_pe(prompt.row_min, prompt.col_min));
  const Var br = ad::add_fixed(store_.get("dec.corner_br"), point_pe(prompt.row_max, prompt.col_max));
  return ad::add(tl, br);
}

Var Model::decode_mask_var(const Var& features, const Var* prompt) const {
  const auto [fh, fw] = feature_hw();
  const long C = cfg_.encoder_dims.back();
  if (features.value().dims != std::vector<long>{C, fh, fw})
    throw std::invalid_argument("decode: feature shape " + shape_str(features.value().dims) +
                                " does not match expected " + shape_str({C, fh, fw}));
  if (prompt && prompt->value().dims != std::vector<long>{1, cfg_.prompt_embed_dim})
    throw std::invalid_argument("decode: prompt embedding has wrong dimension");

  const long d = cfg_.prompt_embed_dim;
  const long n = fh * fw;
  const long heads = cfg_.decoder_heads;

  Var f = ad::conv2d(features, store_.get("neck.w"), store_.get("neck.b"), 1, 0);
  Var img = ad::transpose(ad::reshape_copy(f, {d, n}));
  img = norm(store_, "neck.ln", img);
  img = ad::add(img, store_.get("dec.img_pos"));

  Var t = ad::concat_rows({store_.get("dec.mask_token"),
                           prompt ? *prompt : store_.get("dec.no_prompt")});
  for (long l = 0; l < cfg_.decoder_layers; ++l) {
    const std::string pf = "dec.l" + std::to_string(l);
    t = norm(store_, pf + ".ln1", ad::add(t, mha(store_, pf + ".self", t, t, heads)));
    t = norm(store_, pf + ".ln2", ad::add(t, mha(store_, pf + ".t2i", t, img, heads)));
    t = norm(store_, pf + ".ln3", ad::add(t, mlp_fwd(store_, pf + ".mlp", t)));
    img = norm(store_, pf + ".ln4", ad::add(img, mha(store_, pf + ".i2t", img, t, heads)));
  }
  t = norm(store_, "dec.final_ln", ad::add(t, mha(store_, "dec.final", t, img, heads)));

  Var hyper = ad::gelu(linear(ad::slice_rows(t, 0, 1), store_.get("dec.hyper.fc1.w"),
                              store_.get("dec.hyper.fc1.b")));
  hyper = linear(hyper, store_.get("dec.hyper.fc2.w"), store_.get("dec.hyper.fc2.b"));

  Var fm = ad::reshape_copy(ad::transpose(img), {d, fh, fw});
  fm = ad::gelu(ad::upconv2x(fm, store_.get("dec.up1.w"), store_.get("dec.up1.b")));
  fm = ad::upconv2x(fm, store_.get("dec.up2.w"), store_.get("dec.up2.b"));

  const Var low = ad::reshape_copy(ad::matmul(hyper, ad::reshape_copy(fm, {d / 4, 16 * n})),
                                   {1, 4 * fh, 4 * fw});
  const Var up = ad::upsample_bilinear(low, cfg_.input_size[0], cfg_.input_size[1]);
  return ad::reshape_copy(up, {cfg_.input_size[0], cfg_.input_size[1]});
}

std::vector<Tensor> Model::encode_per_modality(const Tensor& slice) const {
  ad::NoGradGuard ng;
  std::vector<Tensor> out;
  for (const Var& v : encode_per_modality_vars(slice)) out.push_back(v.value());
  return out;
}

Tensor Model::encode_prompt(const SpatialPrompt& prompt) const {
  ad::NoGradGuard ng;
  return encode_prompt_var(prompt).value();
}

Tensor Model::decode_mask(const Tensor& features, const Tensor* prompt_embedding) const {
  ad::NoGradGuard ng;
  const Var f = Var::constant(features);
  if (prompt_embedding) {
    const Var p = Var::constant(*prompt_embedding);
    return decode_mask_var(f, &p).value();
  }
  return decode_mask_var(f, nullptr).value();
}

}  // namespace subseg
