#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "spcm/container.hpp"
#include "spcm/datamodel.hpp"
#include "spcm/fixhist.hpp"

namespace spcm {

// Cell-center mapping of a pixel index between resolutions.
inline std::size_t scale_index(std::size_t i, std::size_t from, std::size_t to) {
  if (from == 0 || to == 0) throw ShapeError("scale_index: empty axis");
  const auto s = std::size_t((double(i) + 0.5) * double(to) / double(from));
  return std::min(s, to - 1);
}

// Read-side view of an on-disk dataset at the model's working resolution.
// Cue maps are area-resampled once per video and cached; fixation-derived
// maps (history blurs, KLD/DAM densities) are built directly on the model
// grid with sigma scaled from the native 1 degree value. Frames are
// subsampled to 10 fps; all frame indices in the public interface are
// subsampled indices.
class DatasetView {
 public:
  DatasetView(std::filesystem::path root, std::size_t model_h, std::size_t model_w)
      : root_(std::move(root)),
        manifest_(load_manifest(root_ / "manifest.json")),
        model_h_(model_h),
        model_w_(model_w) {
    if (model_h_ < 4 || model_w_ < 4) throw ShapeError("dataset view: model grid too small");
    sigma_native_ = pixels_per_degree(manifest_.geometry);
    sigma_model_ = sigma_native_ * double(model_w_) / double(manifest_.geometry.pixels_w);
  }

  const DatasetManifest& manifest() const { return manifest_; }
  std::size_t model_height() const { return model_h_; }
  std::size_t model_width() const { return model_w_; }
  double sigma_model() const { return sigma_model_; }

  std::size_t frame_stride(const std::string& video) const {
    const double fps = manifest_.video(video).fps;
    return std::max<std::size_t>(1, std::size_t(std::llround(fps / 10.0)));
  }

  std::size_t sub_frames(const std::string& video) const {
    const VideoEntry& v = manifest_.video(video);
    const std::size_t stride = frame_stride(video);
    return (v.frame_count + stride - 1) / stride;
  }

  // [T',K,1,H,W] over cue frames t_end-T'+1 .. t_end in the given modality order
  CueWindow cue_window(const std::string& video, std::size_t t_end, std::size_t context,
                       const std::vector<std::string>& modalities) const {
    if (context == 0) throw ShapeError("cue window: empty context");
    if (t_end + 1 < context)
      throw DataError(strf("cue window: t_end %zu needs %zu preceding frames", t_end, context));
    if (t_end >= sub_frames(video))
      throw DataError(strf("cue window: t_end %zu past video '%s' (%zu subsampled frames)",
                           t_end, video.c_str(), sub_frames(video)));
    const VideoData& data = cached(video);
    CueWindow win;
    win.t_end = t_end;
    win.modalities = modalities;
    win.maps = Tensor({context, modalities.size(), 1, model_h_, model_w_});
    const std::size_t hw = model_h_ * model_w_;
    for (std::size_t t = 0; t < context; ++t) {
      const std::size_t frame = t_end - context + 1 + t;
      for (std::size_t k = 0; k < modalities.size(); ++k) {
        auto it = data.cues.find(modalities[k]);
        if (it == data.cues.end())
          throw DataError(strf("cue window: no modality '%s'", modalities[k].c_str()));
        const Tensor& stack = it->second;
        const std::size_t off_src = frame * hw;
        const std::size_t off_dst = (t * modalities.size() + k) * hw;
        std::copy(stack.data.begin() + off_src, stack.data.begin() + off_src + hw,
                  win.maps.data.begin() + off_dst);
      }
    }
    return win;
  }

  // fixation at a subsampled frame, mapped onto the model grid
  FixationPoint point(const ObserverId& observer, const std::string& video,
                      std::size_t t) const {
    const VideoData& data = cached(video);
    auto it = data.fixations.find(observer);
    if (it == data.fixations.end())
      throw DataError(strf("dataset view: no observer '%s'", observer.c_str()));
    const std::size_t raw = t * frame_stride(video);
    if (raw >= it->second.size())
      throw DataError(strf("dataset view: frame %zu past video '%s'", t, video.c_str()));
    const FixationPoint& p = it->second[raw];
    FixationPoint out;
    out.x = scale_index(p.x, manifest_.geometry.pixels_w, model_w_);
    out.y = scale_index(p.y, manifest_.geometry.pixels_h, model_h_);
    out.observer = observer;
    out.frame = t;
    return out;
  }

  PriorityMap observer_blur(const ObserverId& observer, const std::string& video,
                            std::size_t t) const {
    return blur_fixation(point(observer, video, t), model_h_, model_w_, sigma_model_);
  }

  // mass-normalized blur of the observer's own fixation (divergence target)
  PriorityMap kld_target(const ObserverId& observer, const std::string& video,
                         std::size_t t) const {
    PriorityMap m = observer_blur(observer, video, t);
    m.grid = normalize_sum(m.grid);
    m.kind = MapKind::density;
    return m;
  }

  PriorityMap group_density(const std::string& video, std::size_t t,
                            const ObserverId* exclude = nullptr) const {
    std::vector<FixationPoint> pts;
    for (const ObserverId& obs : manifest_.observers) {
      if (exclude && obs == *exclude) continue;
      pts.push_back(point(obs, video, t));
    }
    if (pts.empty()) throw DataError("group density: no observers left");
    return density_from_group(pts, model_h_, model_w_, sigma_model_);
  }

  // one group-attention target per cue window step
  std::vector<PriorityMap> dam_targets(const std::string& video, std::size_t t_end,
                                       std::size_t context) const {
    std::vector<PriorityMap> out;
    out.reserve(context);
    for (std::size_t t = 0; t < context; ++t)
      out.push_back(group_density(video, t_end - context + 1 + t));
    return out;
  }

  // teacher-forced history: blurred fixations for frames t_end-T' .. t_end-1
  FixationHistory init_teacher_forced(const ObserverId& observer, const std::string& video,
                                      std::size_t t_end, std::size_t context) const {
    if (t_end < context)
      throw DataError(strf("history: t_end %zu needs %zu preceding frames", t_end, context));
    std::vector<PriorityMap> maps;
    maps.reserve(context);
    for (std::size_t t = t_end - context; t < t_end; ++t)
      maps.push_back(observer_blur(observer, video, t));
    return FixationHistory(observer, std::move(maps));
  }

 private:
  struct VideoData {
    std::map<std::string, Tensor> cues;  // modality -> [n_sub,1,Hm,Wm]
    FixationTable fixations;             // raw frame indexed
  };

  const VideoData& cached(const std::string& video) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = cache_.find(video);
    if (it != cache_.end()) return it->second;
    VideoData data;
    const VideoEntry& v = manifest_.video(video);
    const std::size_t stride = frame_stride(video);
    const std::size_t n_sub = (v.frame_count + stride - 1) / stride;
    const std::size_t hw = model_h_ * model_w_;
    for (const std::string& mod : manifest_.modalities) {
      std::vector<ContainerEntry> entries = load_container(root_ / v.cue_files.at(mod));
      const Tensor* maps = nullptr;
      for (const ContainerEntry& e : entries)
        if (e.name == "maps") maps = &e.tensor;
      if (!maps) throw DataError(strf("%s: no 'maps' entry", v.cue_files.at(mod).c_str()));
      if (maps->rank() != 4 || maps->shape[0] != v.frame_count || maps->shape[1] != 1 ||
          maps->shape[2] != manifest_.geometry.pixels_h ||
          maps->shape[3] != manifest_.geometry.pixels_w)
        throw DataError(strf("%s: maps disagree with manifest (%zu frames at %zux%zu)",
                             v.cue_files.at(mod).c_str(), v.frame_count,
                             manifest_.geometry.pixels_w, manifest_.geometry.pixels_h));
      Tensor stack({n_sub, 1, model_h_, model_w_});
      const std::size_t src_hw = maps->shape[2] * maps->shape[3];
      for (std::size_t t = 0; t < n_sub; ++t) {
        Tensor frame({1, maps->shape[2], maps->shape[3]});
        const std::size_t off = t * stride * src_hw;
        std::copy(maps->data.begin() + off, maps->data.begin() + off + src_hw,
                  frame.data.begin());
        Tensor small = area_resample(frame, model_h_, model_w_);
        std::copy(small.data.begin(), small.data.end(), stack.data.begin() + t * hw);
      }
      data.cues[mod] = std::move(stack);
    }
    data.fixations = load_fixations(root_ / v.fixation_file, v.id, v.frame_count,
                                    manifest_.geometry.pixels_h, manifest_.geometry.pixels_w);
    for (const ObserverId& obs : manifest_.observers)
      if (!data.fixations.count(obs))
        throw DataError(strf("%s: observer '%s' missing", v.fixation_file.c_str(),
                             obs.c_str()));
    return cache_.emplace(video, std::move(data)).first->second;
  }

  std::filesystem::path root_;
  DatasetManifest manifest_;
  std::size_t model_h_, model_w_;
  double sigma_native_ = 0, sigma_model_ = 0;
  mutable std::mutex mutex_;
  mutable std::map<std::string, VideoData> cache_;
};

// Per-modality input sequences in the model's declared order; the name
// "history" pulls from the fixation history, everything else from the window.
inline std::vector<std::vector<Tensor>> assemble_inputs(
    const CueWindow& window, const FixationHistory& history,
    const std::vector<std::string>& model_modalities) {
  std::vector<std::vector<Tensor>> inputs;
  inputs.reserve(model_modalities.size());
  for (const std::string& mod : model_modalities) {
    if (mod == "history") {
      if (history.context() != window.context())
        throw ShapeError(strf("assemble: history length %zu vs window %zu", history.context(),
                              window.context()));
      inputs.push_back(history.as_seq());
      continue;
    }
    auto it = std::find(window.modalities.begin(), window.modalities.end(), mod);
    if (it == window.modalities.end())
      throw DataError(strf("assemble: window lacks modality '%s'", mod.c_str()));
    const std::size_t k = std::size_t(it - window.modalities.begin());
    std::vector<Tensor> seq;
    seq.reserve(window.context());
    for (std::size_t t = 0; t < window.context(); ++t) seq.push_back(window.step_map(t, k));
    inputs.push_back(std::move(seq));
  }
  return inputs;
}

}  // namespace spcm
