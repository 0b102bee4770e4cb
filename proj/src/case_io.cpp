#include "appf/case_io.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace appf::grid {

using nlohmann::json;

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    auto it = j.find(key);
    return it == j.end() ? fallback : it->get<T>();
}

const json& need(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end()) throw ConfigError(std::string("case file: missing key '") + key + "'");
    return *it;
}

}  // namespace

Network parse_network(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("case file: ") + e.what());
    }

    Network net;
    try {
        net.name = get_or<std::string>(doc, "name", "unnamed");
        net.base_mva = get_or(doc, "base_mva", 100.0);

        for (const auto& a : need(doc, "areas")) {
            Area area;
            area.id = need(a, "id").get<int>();
            area.name = get_or<std::string>(a, "name", "A" + std::to_string(area.id));
            net.areas.push_back(area);
        }

        for (const auto& b : need(doc, "buses")) {
            Bus bus;
            bus.id = need(b, "id").get<int>();
            bus.kind = bus_kind_from_string(need(b, "kind").get<std::string>());
            bus.area = net.area_index(need(b, "area").get<int>());
            bus.v_mag = get_or(b, "v_mag", 1.0);
            bus.v_ang = get_or(b, "v_ang", 0.0);
            bus.p_inj = get_or(b, "p_inj", 0.0);
            bus.q_inj = get_or(b, "q_inj", 0.0);
            bus.v_min = get_or(b, "v_min", 0.95);
            bus.v_max = get_or(b, "v_max", 1.05);
            bus.shunt = Complex(get_or(b, "g_shunt", 0.0), get_or(b, "b_shunt", 0.0));
            net.areas[bus.area].buses.push_back(net.buses.size());
            net.buses.push_back(bus);
        }

        for (const auto& b : need(doc, "branches")) {
            Branch br;
            br.from = net.bus_index(need(b, "from").get<int>());
            br.to = net.bus_index(need(b, "to").get<int>());
            br.series_impedance = Complex(need(b, "r").get<double>(), need(b, "x").get<double>());
            br.shunt = Complex(get_or(b, "g", 0.0), get_or(b, "b", 0.0));
            br.thermal_rating_p = get_or(b, "rating", 9.99);
            net.branches.push_back(br);
        }

        for (const auto& g : get_or(doc, "sg", json::array())) {
            SgUnit sg;
            sg.name = need(g, "name").get<std::string>();
            sg.bus = net.bus_index(need(g, "bus").get<int>());
            sg.p_set = need(g, "p_set").get<double>();
            sg.q_set = get_or(g, "q_set", 0.0);
            sg.v_set = get_or(g, "v_set", 1.0);
            sg.p_min = get_or(g, "p_min", 0.0);
            sg.p_max = need(g, "p_max").get<double>();
            sg.q_min = get_or(g, "q_min", -9.99);
            sg.q_max = get_or(g, "q_max", 9.99);
            sg.inertia_h = need(g, "H").get<double>();
            sg.damping_d = get_or(g, "D", 0.0);
            sg.droop_r = get_or(g, "R", 0.05);
            sg.governor_time_constant = get_or(g, "T_gov", 0.5);
            sg.avr_gain = get_or(g, "K_avr", 20.0);
            sg.avr_time_constant = get_or(g, "T_avr", 1.0);
            sg.transient_reactance = get_or(g, "xd_prime", 0.1);
            sg.agc_participation_factor = get_or(g, "agc_pf", 0.0);
            net.sgs.push_back(sg);
        }

        for (const auto& g : get_or(doc, "ibr", json::array())) {
            IbrUnit ibr;
            ibr.name = need(g, "name").get<std::string>();
            ibr.bus = net.bus_index(need(g, "bus").get<int>());
            ibr.p_set = need(g, "p_set").get<double>();
            ibr.q_set = get_or(g, "q_set", 0.0);
            ibr.s_max = need(g, "s_max").get<double>();
            ibr.p_min = get_or(g, "p_min", 0.0);
            ibr.p_max = get_or(g, "p_max", ibr.s_max);
            ibr.q_min = get_or(g, "q_min", -ibr.s_max);
            ibr.q_max = get_or(g, "q_max", ibr.s_max);
            ibr.actuation_time_constant = get_or(g, "T_act", 0.01);
            net.ibrs.push_back(ibr);
        }

        for (const auto& l : get_or(doc, "loads", json::array())) {
            Load load;
            load.bus = net.bus_index(need(l, "bus").get<int>());
            load.p = need(l, "p").get<double>();
            load.q = get_or(l, "q", 0.0);
            net.loads.push_back(load);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("case file: ") + e.what());
    }

    net.validate();
    return net;
}

Network load_network(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open case file " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_network(buffer.str());
}

std::string to_json(const Network& net, int indent) {
    json doc;
    doc["name"] = net.name;
    doc["base_mva"] = net.base_mva;
    doc["areas"] = json::array();
    for (const auto& a : net.areas) doc["areas"].push_back({{"id", a.id}, {"name", a.name}});

    doc["buses"] = json::array();
    for (const auto& b : net.buses) {
        doc["buses"].push_back({{"id", b.id},
                                {"kind", to_string(b.kind)},
                                {"area", net.areas[b.area].id},
                                {"v_mag", b.v_mag},
                                {"v_ang", b.v_ang},
                                {"p_inj", b.p_inj},
                                {"q_inj", b.q_inj},
                                {"v_min", b.v_min},
                                {"v_max", b.v_max},
                                {"g_shunt", b.shunt.real()},
                                {"b_shunt", b.shunt.imag()}});
    }

    doc["branches"] = json::array();
    for (const auto& br : net.branches) {
        doc["branches"].push_back({{"from", net.buses[br.from].id},
                                   {"to", net.buses[br.to].id},
                                   {"r", br.series_impedance.real()},
                                   {"x", br.series_impedance.imag()},
                                   {"g", br.shunt.real()},
                                   {"b", br.shunt.imag()},
                                   {"rating", br.thermal_rating_p}});
    }

    doc["sg"] = json::array();
    for (const auto& g : net.sgs) {
        doc["sg"].push_back({{"name", g.name},
                             {"bus", net.buses[g.bus].id},
                             {"p_set", g.p_set},
                             {"q_set", g.q_set},
                             {"v_set", g.v_set},
                             {"p_min", g.p_min},
                             {"p_max", g.p_max},
                             {"q_min", g.q_min},
                             {"q_max", g.q_max},
                             {"H", g.inertia_h},
                             {"D", g.damping_d},
                             {"R", g.droop_r},
                             {"T_gov", g.governor_time_constant},
                             {"K_avr", g.avr_gain},
                             {"T_avr", g.avr_time_constant},
                             {"xd_prime", g.transient_reactance},
                             {"agc_pf", g.agc_participation_factor}});
    }

    doc["ibr"] = json::array();
    for (const auto& g : net.ibrs) {
        doc["ibr"].push_back({{"name", g.name},
                              {"bus", net.buses[g.bus].id},
                              {"p_set", g.p_set},
                              {"q_set", g.q_set},
                              {"s_max", g.s_max},
                              {"p_min", g.p_min},
                              {"p_max", g.p_max},
                              {"q_min", g.q_min},
                              {"q_max", g.q_max},
                              {"T_act", g.actuation_time_constant}});
    }

    doc["loads"] = json::array();
    for (const auto& l : net.loads)
        doc["loads"].push_back({{"bus", net.buses[l.bus].id}, {"p", l.p}, {"q", l.q}});

    return doc.dump(indent);
}

void save_network(const Network& net, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << to_json(net) << '\n';
}

}  // namespace appf::grid
