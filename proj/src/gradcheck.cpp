// SPDX-License-Identifier: Apache-2.0

#include "vikdf/gradcheck.hpp"

#include <cmath>
#include <numeric>

#include "vikdf/distillation.hpp"
#include "vikdf/integration.hpp"
#include "vikdf/model.hpp"

namespace vikdf {

GradCheckResult grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double h) {
  for (const auto& [name, p] : params) {
    if (!p.requires_grad())
      throw ContractError("grad_check: parameter '" + name + "' does not require gradients");
    Tensor(p).zero_grad();  // drop any stale accumulation
  }

  Tensor loss = f();
  if (loss.numel() != 1) throw DimensionError("grad_check: f() must return a scalar");
  loss.backward();

  // Snapshot analytic gradients (missing buffer means identically zero).
  std::vector<std::vector<double>> analytic;
  for (const auto& [name, p] : params) {
    if (p.has_grad())
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    else
      analytic.emplace_back(p.numel(), 0.0);
  }

  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi].second;
    double* v = p.raw();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      double orig = v[i];
      v[i] = orig + h;
      double up = f().item();
      v[i] = orig - h;
      double down = f().item();
      v[i] = orig;
      double fd = (up - down) / (2.0 * h);
      double ad = analytic[pi][i];
      double rel = std::abs(ad - fd) / std::max(1.0, std::abs(fd));
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = params[pi].first;
        res.worst_index = i;
        res.analytic = ad;
        res.numeric = fd;
      }
    }
  }
  return res;
}

std::vector<LossGradReport> check_loss_gradients(std::uint64_t seed, int configs, double tol) {
  if (configs < 1) throw InputError("check_loss_gradients: need at least one configuration");
  std::vector<LossGradReport> out;
  for (int ci = 0; ci < configs; ++ci) {
    std::uint64_t cseed = seed + 1000ull * static_cast<std::uint64_t>(ci);
    ModelConfig cfg;
    cfg.d_enc = 8;
    cfg.d_k = 8;
    cfg.d_fuse = 8;
    cfg.d_lm = 8;
    cfg.enc_heads = 2;
    cfg.iq_heads = 2;
    cfg.lm_heads = 2;
    cfg.enc_ffn_mult = 2;
    cfg.lm_ffn_mult = 2;
    cfg.enc_layers = 1;
    cfg.iq_layers = 1;
    cfg.lm_layers = 1;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.max_text_len = 16;
    cfg.max_lm_len = 40;
    cfg.n_queries = 2 + (ci % 3);
    cfg.caption_prompt = "cap:";
    cfg.reconstruction_prompt = "rec:";
    cfg.pooling = (ci % 2) ? "max_pairwise" : "mean";
    cfg.knowledge_readout = (ci % 2) ? "last_tokens" : "slots";
    cfg.seed = cseed;
    cfg.data_seed = cseed + 1;
    std::int64_t B = 2 + (ci % 2);  // TIM is identically zero at batch 1

    VikdfModel model(cfg);
    Rng drng(cseed + 7);
    PairSet set;
    set.image_size = cfg.image_size;
    const char* captions[] = {"red box here", "a blue dot", "one big cat"};
    for (std::int64_t b = 0; b < B; ++b) {
      PairSample s;
      s.image.resize(static_cast<std::size_t>(3 * cfg.image_size * cfg.image_size));
      for (auto& px : s.image) px = drng.uniform();
      s.caption = captions[b];
      s.attribute = b % 4;
      set.samples.push_back(std::move(s));
    }
    std::vector<std::int64_t> idx(static_cast<std::size_t>(B));
    std::iota(idx.begin(), idx.end(), 0);
    PairBatch batch = make_pair_batch(model, set, idx, drng);

    auto kt = [&] {
      return model.iq.distill_from_text(
          model.text_enc.encode(batch.enc_text.ids, batch.enc_text.mask));
    };
    auto ki = [&] { return model.iq.distill_from_image(model.image_enc.encode(batch.images)); };
    auto p = [&](const char* name) {
      const ParamRegistry::Entry* e = model.reg.find(name);
      if (!e) throw ContractError(std::string("check_loss_gradients: no parameter '") + name + "'");
      return std::make_pair(std::string(name), e->tensor);
    };

    struct Case {
      const char* name;
      std::function<Tensor()> f;
      std::vector<std::pair<std::string, Tensor>> params;
    };
    std::vector<Case> cases;
    cases.push_back({"l_tim",
                     [&] { return loss_tim(kt(), ki(), model.temperature, cfg.pooling); },
                     {p("iqformer.query_bank"), p("temperature.log_tau"),
                      p("iqformer.layer0.cross.wk"), p("iqformer.final_ln.g")}});
    {
      std::vector<std::pair<std::string, Tensor>> ps = {p("iqformer.query_bank"),
                                                        p("image_fuser.in_w"),
                                                        p("image_fuser.cross.wk"),
                                                        p("img_head.conv_b")};
      if (ci == 0) ps.push_back(p("img_head.conv_w"));
      cases.push_back({"l_tamim",
                       [&] {
                         ImageEncoding mf = model.image_enc.encode(batch.masked_images);
                         Tensor fused = model.image_fuser.fuse(mf.hidden, kt());
                         return loss_tamim(model.img_head.decode(fused), batch.images,
                                           batch.image_mask, cfg.patch_size);
                       },
                       std::move(ps)});
    }
    cases.push_back({"l_iamtm",
                     [&] {
                       TextEncoding mf = model.text_enc.encode(batch.enc_text_masked.ids,
                                                               batch.enc_text_masked.mask);
                       Tensor fused = model.text_fuser.fuse(mf.hidden, ki());
                       return loss_iamtm(model.txt_head.predict(fused), batch.enc_text.ids,
                                         batch.text_mask_plan);
                     },
                     {p("iqformer.query_bank"), p("text_fuser.in_w"), p("text_fuser.cross.wv"),
                      p("txt_head.w"), p("txt_head.b")}});
    cases.push_back({"l_iaci",
                     [&] {
                       return loss_iaci(model.lm, model.proj, kt(), batch.lm_rows,
                                        batch.lm_target_start);
                     },
                     {p("iqformer.query_bank"), p("integration.in_w"), p("integration.in_b")}});
    {
      std::vector<std::pair<std::string, Tensor>> ps = {
          p("iqformer.query_bank"), p("integration.out_w"), p("integration.out_b")};
      if (cfg.knowledge_readout == "slots") ps.push_back(p("integration.slots"));
      std::vector<std::int32_t> rp = ByteTokenizer::encode(cfg.reconstruction_prompt);
      cases.push_back({"l_iakr",
                       [&, rp] {
                         KnowledgeVectors khat = reconstruct_knowledge(
                             model.lm, model.proj, batch.recon_text, rp, cfg.knowledge_readout);
                         return loss_iakr(kt(), khat);
                       },
                       std::move(ps)});
    }
    cases.push_back({"l_kd",
                     [&] { return compute_kd(model, batch, kt(), ki()).total; },
                     {p("iqformer.query_bank"), p("temperature.log_tau"), p("image_fuser.in_w"),
                      p("txt_head.b"), p("img_head.conv_b")}});
    {
      std::vector<std::pair<std::string, Tensor>> ps = {
          p("iqformer.query_bank"), p("integration.in_w"), p("integration.out_w")};
      if (cfg.knowledge_readout == "slots") ps.push_back(p("integration.slots"));
      cases.push_back(
          {"l_ki", [&] { return compute_ki(model, batch, kt()).total; }, std::move(ps)});
    }

    for (auto& c : cases) {
      model.reg.zero_grads();
      GradCheckResult r = grad_check(c.f, c.params, 1e-5);
      out.push_back({c.name, cseed, r, r.max_rel_err <= tol});
    }
  }
  return out;
}

}  // namespace vikdf
