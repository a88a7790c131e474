#include <stdio.h>
#include "cotrain.h"

int main(void) {
  CotrainTrainer *t = NULL;
  if (cotrain_trainer_new("{\"mode\": \"policy_reward\", \"steps\": 2}", 1, &t) != COTRAIN_STATUS_OK) {
    fprintf(stderr, "%s\n", cotrain_last_error());
    return 1;
  }
  const char *json = NULL;
  while (cotrain_trainer_is_done(t) == 0) {
    if (cotrain_trainer_step(t, &json) != COTRAIN_STATUS_OK) {
      fprintf(stderr, "%s\n", cotrain_last_error());
      cotrain_trainer_free(t);
      return 1;
    }
  }
  cotrain_trainer_free(t);

  CotrainPrecision p;
  cotrain_exact_precision(0.8, 0.7, 3, &p);
  printf("cotrain %s: a(0.8, 0.7, 3) = %.5f\n", cotrain_version(), p.a_strict);
  return 0;
}
