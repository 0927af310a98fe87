// Tiny end-to-end run: a few dozen self-supervised steps on synthetic shapes,
// then a linear probe on the teacher's CLS features.
#include <iostream>

#include "jea/harness.hpp"

int main() {
  jea::tune_allocator();
  jea::ModelConfig model;
  model.image_size = 32;
  model.patch_size = 8;
  model.embed_dim = 32;
  model.depth = 2;
  model.num_heads = 2;
  model.head_hidden_dim = 64;
  model.head_bottleneck_dim = 32;
  model.num_prototypes = 128;

  jea::TrainConfig train;
  train.batch_size = 16;
  train.total_steps = 30;
  train.warmup_steps = 5;
  train.teacher_temp_warmup_steps = 5;

  jea::AugmentationConfig aug;
  aug.global_size = 32;
  aug.local_size = 16;
  aug.n_local = 2;

  jea::SyntheticSpec spec;
  spec.n_samples = 512;
  spec.image_size = 32;
  const jea::Dataset data = jea::synth_generate(spec);
  std::cout << spec.describe() << "\n";

  jea::TrainState st = jea::init_train_state(model, train.seed);
  jea::StepBatcher batcher(data.size(), train.batch_size, train.seed);
  while (st.step < train.total_steps) {
    const auto batch = jea::make_batch(data, batcher.at(st.step), aug, model, train, st.step);
    const auto m = jea::train_step(st, batch, train);
    if (st.step % 10 == 0)
      std::cout << "step " << st.step << " dino " << m.dino_loss << " ibot " << m.ibot_loss << " entropy "
                << m.teacher_entropy << "\n";
  }

  const auto split = data.size() * 3 / 4;
  std::vector<std::size_t> tr(split), va(data.size() - split);
  std::iota(tr.begin(), tr.end(), 0);
  std::iota(va.begin(), va.end(), split);
  const auto ftr = jea::extract_features(st.teacher, data.subset(tr), "train");
  const auto fva = jea::extract_features(st.teacher, data.subset(va), "val");
  jea::ProbeConfig pc;
  pc.epochs = 20;
  std::cout << "linear probe accuracy: " << jea::linear_probe(ftr, fva, pc).accuracy << "\n";
}
