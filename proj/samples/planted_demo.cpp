// End-to-end walk through the library on the bundled planted fixture:
// fit binary weights with L=4, then compare against the uniform ensemble.
//
//   planted_demo [fixtures-dir]

#include <iostream>
#include <string>

#include "lara/lara.hpp"

int main(int argc, char** argv) {
  const std::filesystem::path root = argc > 1 ? argv[1] : "fixtures";
  try {
    const auto task = lara::load_task(root / "planted");
    const auto table = lara::TableLM::load(root / "planted_table.json");
    lara::CachingProvider provider(table);

    lara::FitConfig fc;
    fc.mode = lara::WeightMode::binary;
    fc.seed = 0;
    const auto partition = lara::partition_demos(task.train, 4);
    const auto fit = lara::fit_weights(partition, task.train, task.tpl, provider, fc);

    std::cout << "binary weights:";
    for (double w : fit.weights.values()) std::cout << ' ' << w;
    std::cout << "\nvalidation loss: " << fit.validation_loss << "\n\n";

    lara::MethodConfig uniform;
    uniform.method = lara::Method::lag_uniform;
    uniform.L = 4;
    std::cout << lara::run_eval(task, uniform, provider).to_table() << '\n';

    lara::MethodConfig selected;
    selected.method = lara::Method::blara;
    selected.weights = fit;
    std::cout << lara::run_eval(task, selected, provider).to_table();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
