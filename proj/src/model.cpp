#include "toco/model.hpp"

#include <cmath>
#include <stdexcept>

namespace toco {

template <typename T>
ToCoModel<T> ToCoModel<T>::init(const TrainConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    ToCoModel m;
    m.vit = VitWeights<T>::init(cfg.vit, rng);
    m.head = ClassifierHead<T>::init(cfg.classes, cfg.vit.dim, rng);
    m.aux_head = ClassifierHead<T>::init(cfg.classes, cfg.vit.dim, rng);
    m.decoder = Decoder<T>::init(cfg.vit.dim, cfg.decoder_width, cfg.classes, rng);
    m.local_proj = ProjectionHead<T>::init(cfg.vit.dim, cfg.proj_hidden, cfg.proj_dim, HeadRole::Local, rng);
    m.global_proj = m.local_proj;
    m.global_proj.role = HeadRole::Global;
    return m;
}

template <typename T>
std::vector<std::pair<std::string, Param<T>*>> ToCoModel<T>::named_params() {
    std::vector<std::pair<std::string, Param<T>*>> out = vit.named_params();
    out.emplace_back("head.weight", &head.weight);
    out.emplace_back("aux_head.weight", &aux_head.weight);
    for (auto& [n, p] : decoder.named_params()) out.emplace_back("decoder." + n, p);
    for (auto& [n, p] : local_proj.named_params()) out.emplace_back("local_proj." + n, p);
    for (auto& [n, p] : global_proj.named_params()) out.emplace_back("global_proj." + n, p);
    return out;
}

template <typename T>
std::vector<Param<T>*> ToCoModel<T>::trainable() {
    std::vector<Param<T>*> out;
    for (auto& [n, p] : named_params()) {
        if (!n.starts_with("global_proj.")) out.push_back(p);
    }
    return out;
}

template <typename T>
void AdamW<T>::step(const std::vector<Param<T>*>& params, double lr) {
    if (m_.empty()) {
        for (auto* p : params) {
            m_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
        }
    }
    if (m_.size() != params.size()) throw std::invalid_argument("AdamW: parameter list changed between steps");
    ++t_;
    const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
    const T c1 = T(1) - T(std::pow(cfg_.beta1, double(t_)));
    const T c2 = T(1) - T(std::pow(cfg_.beta2, double(t_)));
    const T decay = T(1) - T(lr * cfg_.weight_decay);
    const T eta = T(lr), eps = T(cfg_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Param<T>& p = *params[i];
        m_[i] = b1 * m_[i] + (T(1) - b1) * p.grad;
        v_[i] = b2 * v_[i] + (T(1) - b2) * p.grad.cwiseProduct(p.grad);
        p.value *= decay;
        p.value.array() -= eta * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    }
}

template struct ToCoModel<float>;
template struct ToCoModel<double>;
template class AdamW<float>;
template class AdamW<double>;

}  // namespace toco
