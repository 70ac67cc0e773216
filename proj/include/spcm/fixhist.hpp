#pragma once

#include <vector>

#include "spcm/datamodel.hpp"

namespace spcm {

// FIFO of the T' most recent priority maps for one observer, fed to the model
// as the history modality. Teacher-forced entries are ground-truth blurs;
// autoregressive rollouts push raw predictions, so the ground-truth horizon
// shrinks by one per step ahead.
class FixationHistory {
 public:
  FixationHistory(ObserverId observer, std::vector<PriorityMap> initial)
      : observer_(std::move(observer)), queue_(std::move(initial)) {
    if (queue_.empty()) throw Error("fixation history: empty initial queue");
    for (const PriorityMap& m : queue_) {
      m.validate();
      if (m.height() != queue_[0].height() || m.width() != queue_[0].width())
        throw ShapeError("fixation history: mixed map sizes");
    }
  }

  const ObserverId& observer() const { return observer_; }
  std::size_t context() const { return queue_.size(); }
  std::size_t height() const { return queue_[0].height(); }
  std::size_t width() const { return queue_[0].width(); }
  const PriorityMap& entry(std::size_t i) const { return queue_.at(i); }

  std::size_t teacher_forced_count() const {
    std::size_t n = 0;
    for (const PriorityMap& m : queue_)
      if (m.kind == MapKind::ground_truth_blur) ++n;
    return n;
  }

  // drop the oldest map, append the new one; length is invariant
  void push(PriorityMap m) {
    m.validate();
    if (m.height() != height() || m.width() != width())
      throw ShapeError(strf("fixation history: push %zux%zu into %zux%zu queue", m.width(),
                            m.height(), width(), height()));
    queue_.erase(queue_.begin());
    queue_.push_back(std::move(m));
  }

  // [T',1,H,W], oldest first, aligned with the cue window timeline
  Tensor as_modality() const {
    Tensor out({context(), 1, height(), width()});
    const std::size_t hw = height() * width();
    for (std::size_t t = 0; t < context(); ++t)
      std::copy(queue_[t].grid.data.begin(), queue_[t].grid.data.end(),
                out.data.begin() + t * hw);
    return out;
  }

  // per-step view matching the model input layout
  std::vector<Tensor> as_seq() const {
    std::vector<Tensor> out;
    out.reserve(context());
    for (const PriorityMap& m : queue_) out.push_back(m.grid);
    return out;
  }

 private:
  ObserverId observer_;
  std::vector<PriorityMap> queue_;
};

// Teacher-forced initialization from T' consecutive fixations (the frames
// preceding the prediction target), blurred at the working resolution.
inline FixationHistory history_from_points(const std::vector<FixationPoint>& points,
                                           const ObserverId& observer, std::size_t H,
                                           std::size_t W, double sigma_px) {
  if (points.empty()) throw Error("fixation history: no points");
  std::vector<PriorityMap> maps;
  maps.reserve(points.size());
  for (const FixationPoint& p : points) maps.push_back(blur_fixation(p, H, W, sigma_px));
  return FixationHistory(observer, std::move(maps));
}

}  // namespace spcm
