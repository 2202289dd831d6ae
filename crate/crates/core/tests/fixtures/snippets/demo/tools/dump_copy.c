#include <stdio.h>
#include "demo.h"

int dump_buffer(const unsigned char *buf, size_t len)
{
  demo_handle *h = demo_parse(buf, len);
  if (!h) return -1;
  printf("%d\n", demo_get(h, 0));
  demo_free(h);
  return 0;
}
