/* Link-time interposition shim: link with -Wl,--wrap=<api> for each api. */
#include "demo.h"

#include <stdio.h>
#include <stdlib.h>

demo_handle *__real_demo_parse(const unsigned char *data, size_t size);
demo_handle *__real_demo_parse_file(const char *path);
int __real_demo_get(demo_handle *handle, int index);
void __real_demo_free(demo_handle *handle);

static FILE *hook_log(void) {
  static FILE *log;
  static int opened;
  if (!opened) {
    const char *path = getenv("DRIVERGEN_HOOK_LOG");
    opened = 1;
    if (path && path[0])
      log = fopen(path, "a");
  }
  return log;
}

static void hook_hex(FILE *log, const unsigned char *data, size_t size) {
  if (size == 0) {
    fputc('-', log);
    return;
  }
  for (size_t i = 0; i < size; i++)
    fprintf(log, "%02x", data[i]);
}

static void hook_call(const char *api) {
  FILE *log = hook_log();
  if (!log)
    return;
  fprintf(log, "call %s\n", api);
  fflush(log);
}

demo_handle *__wrap_demo_parse(const unsigned char *data, size_t size) {
  FILE *log = hook_log();
  hook_call("demo_parse");
  if (log) {
    fprintf(log, "arg demo_parse 0 ");
    hook_hex(log, data, data ? size : 0);
    fputc('\n', log);
    fflush(log);
  }
  return __real_demo_parse(data, size);
}

demo_handle *__wrap_demo_parse_file(const char *path) {
  FILE *log = hook_log();
  hook_call("demo_parse_file");
  if (log && path) {
    unsigned char buf[4096];
    size_t n = 0;
    size_t len = 0;
    FILE *fp = fopen(path, "rb");
    if (fp) {
      n = fread(buf, 1, sizeof(buf), fp);
      fclose(fp);
    }
    while (path[len])
      len++;
    fprintf(log, "file demo_parse_file 0 ");
    hook_hex(log, (const unsigned char *)path, len);
    fputc(' ', log);
    hook_hex(log, buf, n);
    fputc('\n', log);
    fflush(log);
  }
  return __real_demo_parse_file(path);
}

int __wrap_demo_get(demo_handle *handle, int index) {
  FILE *log = hook_log();
  hook_call("demo_get");
  if (log) {
    fprintf(log, "int demo_get 1 %d\n", index);
    fflush(log);
  }
  return __real_demo_get(handle, index);
}

void __wrap_demo_free(demo_handle *handle) {
  hook_call("demo_free");
  __real_demo_free(handle);
}
