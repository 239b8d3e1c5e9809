#include <stdio.h>
#include <string.h>
#include "semifreddo.h"

#define CHECK(call)                                                   \
  do {                                                                \
    SfStatus s_ = (call);                                             \
    if (s_ != SF_STATUS_OK) {                                         \
      fprintf(stderr, "%s -> %d: %s\n", #call, s_, sf_last_error()); \
      return 1;                                                       \
    }                                                                 \
  } while (0)

int main(void) {
  SfSpec *spec = NULL;
  SfModel *model = NULL;
  SfQGraph *q = NULL;
  float image[32 * 32];
  float scores[10];
  double ratio = 0.0, area = 0.0;

  CHECK(sf_spec_default(&spec));
  CHECK(sf_spec_effective_ratio(spec, 3, &ratio));
  sf_spec_free(spec);

  CHECK(sf_spec_desk(10, &spec));
  CHECK(sf_model_new(spec, 1234, &model));
  CHECK(sf_model_freeze(model, SF_SCHEME_CORE_PARTITION, 0.0, 0.0, 1234));
  for (int i = 0; i < 32 * 32; i++) image[i] = (float)(i % 17) / 16.0f;
  CHECK(sf_model_forward(model, image, 1, 1, 32, 32, SF_CORE_TRAINABLE1, true, scores, 10));
  CHECK(sf_model_quantize(model, image, 1, 1, 32, 32, SF_CORE_TRAINABLE1, true, &q));
  CHECK(sf_qgraph_infer(q, image, 1, 32, 32, scores, 10));
  CHECK(sf_qgraph_area_mm2(q, &area));
  if (sf_spec_desk(1, &spec) != SF_STATUS_INVALID_ARGUMENT || strlen(sf_last_error()) == 0) return 2;

  printf("version %s ratio %.4f area %.6f\n", sf_version(), ratio, area);
  sf_qgraph_free(q);
  sf_model_free(model);
  return 0;
}
